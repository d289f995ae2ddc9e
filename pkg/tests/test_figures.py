import json

from facevq.figures import (fig_ablation, fig_metric_distributions,
                            fig_training_curves, fig_weight_summary)
from facevq.report import make_report


def test_training_curves_renders(tmp_path):
    log = tmp_path / "train_log.jsonl"
    records = [{"iteration": i, "loss_total": 1.0 / (i + 1), "loss_photo": 0.5 / (i + 1),
                "perplexity": 10.0 + i, "wall_clock": 0.1 * i} for i in range(1, 6)]
    log.write_text("\n".join(json.dumps(r) for r in records))
    out = fig_training_curves(log)
    assert out.exists() and out.suffix == ".png" and out.stat().st_size > 0


def test_ablation_figure(tmp_path):
    body = {
        "joint_codebook_psnr": {d: 20.0 for d in ("diffuse", "specular", "roughness", "normal")},
        "multi_domain_psnr": {d: 25.0 for d in ("diffuse", "specular", "roughness", "normal")},
        "fixed_template_psnr": {d: 18.0 for d in ("diffuse", "specular", "roughness", "normal")},
        "closest_template_psnr": {d: 19.0 for d in ("diffuse", "specular", "roughness", "normal")},
        "reflectance_gap_db": 5.0,
    }
    report = make_report("ablation", {"seed": 0}, body)
    out = fig_ablation(report, tmp_path / "ab.png")
    assert out.exists() and out.stat().st_size > 0


def test_weight_summary_figure(tmp_path):
    books = ("diffuse", "specular", "roughness", "normal", "rgb_texture")
    summaries = {d: {b: 0.2 for b in books} for d in ("rgb", "diffuse")}
    out = fig_weight_summary(summaries, tmp_path / "w.png")
    assert out.exists() and out.stat().st_size > 0


def test_metric_distribution_figure(tmp_path):
    pairs = [{"psnr": 20 + i, "ssim": 0.5 + 0.01 * i} for i in range(30)]
    out = fig_metric_distributions(pairs, tmp_path / "m.png")
    assert out.exists() and out.stat().st_size > 0
