import json

import numpy as np
import pytest

from facevq.checkpoint import (ContainerError, array_digest, container_digest,
                               load_container, params_digest, save_container)


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "enc.w": rng.standard_normal((4, 3)).astype(np.float32),
        "enc.b": rng.standard_normal(4).astype(np.float32),
        "codes": rng.standard_normal((8, 2)).astype(np.float32),
    }


def test_roundtrip_is_bit_exact(tmp_path):
    arrays = _arrays()
    save_container(tmp_path / "a", arrays, config={"lr": 1e-3})
    loaded, cfg = load_container(tmp_path / "a")
    assert cfg == {"lr": 1e-3}
    for name, arr in arrays.items():
        assert np.array_equal(loaded[name], arr)

    save_container(tmp_path / "b", loaded, config=cfg)
    assert (tmp_path / "a" / "blob.bin").read_bytes() == (tmp_path / "b" / "blob.bin").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert container_digest(tmp_path / "a") == container_digest(tmp_path / "b")


def test_digest_mismatch_detected(tmp_path):
    save_container(tmp_path / "c", _arrays())
    blob = tmp_path / "c" / "blob.bin"
    raw = bytearray(blob.read_bytes())
    raw[3] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="digest mismatch"):
        load_container(tmp_path / "c")


def test_missing_manifest(tmp_path):
    with pytest.raises(ContainerError, match="no container manifest"):
        load_container(tmp_path / "nothing")


def test_unknown_format_rejected(tmp_path):
    save_container(tmp_path / "d", _arrays())
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    manifest["format"] = "other-v9"
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ContainerError, match="unrecognized"):
        load_container(tmp_path / "d")


def test_params_digest_tracks_content_not_order():
    arrays = _arrays()
    shuffled = {k: arrays[k] for k in reversed(list(arrays))}
    assert params_digest(arrays) == params_digest(shuffled)
    arrays["enc.w"] = arrays["enc.w"] + 1e-7
    assert params_digest(arrays) != params_digest(shuffled)


def test_array_digest_matches_f32_bytes():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    assert array_digest(arr) == array_digest(arr.astype(np.float32))
