"""facevq: multi-domain codebook face reflectance toolkit.

A desk-scale pipeline that learns discrete latent codebooks over RGB and
reflectance face images (diffuse, specular, roughness, normal), fuses
domain-specific codebooks per latent cell, injects target identities into
the decoder through AdaIN residual branches, and stitches multi-view
outputs into UV reflectance assets.
"""

__version__ = "0.1.0"

DOMAINS = ("rgb", "diffuse", "specular", "roughness", "normal")
REFLECTANCE_DOMAINS = ("diffuse", "specular", "roughness", "normal")
VIEWS = ("left", "frontal", "right")

# Codebook bank ordering is fixed so fusion-weight channel k always refers
# to the same book.
BANK_ORDER = ("diffuse", "specular", "roughness", "normal", "rgb_texture")
