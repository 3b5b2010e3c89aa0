"""Network blocks: encoders, the attention-fused generator, patch
discriminators, and the cycle-consistent skeleton translator.

Checkpoints are a directory of raw little-endian float32 binaries plus a
``manifest.json`` describing every array; loading validates shapes and the
recorded configuration.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .attention import RefinedAttentionBlock
from .errors import BadSpatialSize, IoError, ManifestMismatch, ShapeMismatch

__all__ = [
    "Encoder",
    "Decoder",
    "Generator",
    "Discriminator",
    "SkeletonTranslator",
    "sg_forward",
    "init_weights",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "module_arrays",
    "load_module_arrays",
]


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Normal(0, std) conv init, skipping blocks that init themselves."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d) and not getattr(m, "skip_global_init", False):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True, track_running_stats=False)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, padding_mode="reflect"),
            _norm(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, padding_mode="reflect"),
            _norm(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """Stem + two stride-2 downsamplers + four residual blocks.

    Maps (B, in_ch, H, W) to (B, width, H/4, W/4); H and W must be
    divisible by 4.
    """

    def __init__(self, in_ch: int = 1, width: int = 64):
        super().__init__()
        if width % 4 != 0:
            raise ValueError("width must be divisible by 4")
        w4, w2 = width // 4, width // 2
        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, w4, 7, 1, 3, padding_mode="reflect"),
            _norm(w4),
            nn.ReLU(inplace=True),
        )
        self.down = nn.Sequential(
            nn.Conv2d(w4, w2, 3, 2, 1),
            _norm(w2),
            nn.ReLU(inplace=True),
            nn.Conv2d(w2, width, 3, 2, 1),
            _norm(width),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(4)])

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 != 0 or w % 4 != 0:
            raise BadSpatialSize(f"input size {h}x{w} not divisible by 4")
        return self.blocks(self.down(self.stem(x)))


class Decoder(nn.Module):
    """Two upsampling blocks and an output conv mapped to [0, 1] via tanh.

    The upsampling path keeps full width through the first block: painting
    thin strokes from the coarse bottleneck needs the capacity near the
    output far more than the encoder needs it near the input.
    """

    def __init__(self, width: int = 64, out_ch: int = 1):
        super().__init__()
        w2 = width // 2
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, 1, 1, padding_mode="reflect"),
            _norm(width),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, w2, 3, 1, 1, padding_mode="reflect"),
            _norm(w2),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(w2, out_ch, 7, 1, 3, padding_mode="reflect")
        # start near-white: glyphs are sparse ink on paper, so beginning at
        # the background color lets early training focus on strokes
        nn.init.normal_(self.out.weight, 0.0, 0.02)
        nn.init.constant_(self.out.bias, 1.5)
        self.out.skip_global_init = True

    def forward(self, x):
        return (torch.tanh(self.out(self.up(x))) + 1.0) / 2.0


class Generator(nn.Module):
    """Image encoder -> self-refined attention -> cross-refined attention
    against skeleton features -> decoder. ``use_skeleton=False`` drops the
    skeleton branch (ablation)."""

    def __init__(self, width: int = 64, use_skeleton: bool = True):
        super().__init__()
        self.width = width
        self.use_skeleton = use_skeleton
        self.image_encoder = Encoder(1, width)
        self.self_attention = RefinedAttentionBlock(width)
        if use_skeleton:
            self.skeleton_encoder = Encoder(1, width)
            self.cross_attention = RefinedAttentionBlock(width)
        self.decoder = Decoder(width)
        init_weights(self)

    def forward(self, x_img, x_skel=None):
        return self.forward_with_aux(x_img, x_skel)[0]

    def forward_with_aux(self, x_img, x_skel=None):
        """Generate and also return attention diagnostics and domain logits."""
        if self.use_skeleton:
            if x_skel is None:
                raise ShapeMismatch("generator expects a skeleton image")
            if x_img.shape != x_skel.shape:
                raise ShapeMismatch(
                    f"image {tuple(x_img.shape)} != skeleton {tuple(x_skel.shape)}"
                )
        fi = self.image_encoder(x_img)
        refined, cam_heat, self_logit = self.self_attention(fi)
        aux = {
            "cam_heat": cam_heat,
            "self_heat": refined.sum(dim=-3),
            "self_logit": self_logit,
        }
        if self.use_skeleton:
            fs = self.skeleton_encoder(x_skel)
            refined, _, cross_logit = self.cross_attention(refined, fs)
            aux["cross_heat"] = refined.sum(dim=-3)
            aux["cross_logit"] = cross_logit
        return self.decoder(refined), aux

    def domain_logits(self, x_img, x_skel=None) -> list[torch.Tensor]:
        """Domain-classifier logits of all attention heads for one input."""
        _, aux = self.forward_with_aux(x_img, x_skel)
        logits = [aux["self_logit"]]
        if self.use_skeleton:
            logits.append(aux["cross_logit"])
        return logits


class Discriminator(nn.Module):
    """Three stride-2 conv blocks, optional refined attention, and a patch
    realness map; the attention head doubles as the domain classifier."""

    def __init__(self, width: int = 64, use_attention: bool = True):
        super().__init__()
        if width % 4 != 0:
            raise ValueError("width must be divisible by 4")
        w4, w2 = width // 4, width // 2
        self.use_attention = use_attention
        # layer-style norm: stays defined even when the patch shrinks to 1x1
        self.features = nn.Sequential(
            nn.Conv2d(1, w4, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w4, w2, 4, 2, 1),
            nn.GroupNorm(1, w2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w2, width, 4, 2, 1),
            nn.GroupNorm(1, width),
            nn.LeakyReLU(0.2, inplace=True),
        )
        if use_attention:
            self.attention = RefinedAttentionBlock(width)
        else:
            from .attention import DomainHead, cam_weight  # noqa: F401

            self.head = DomainHead(width)
        self.patch = nn.Conv2d(width, 1, 3, 1, 1)
        init_weights(self)

    def forward(self, img):
        f = self.features(img)
        if self.use_attention:
            f, _, logit = self.attention(f)
        else:
            from .attention import cam_weight

            f, _, logit = cam_weight(f, self.head)
        return self.patch(f), logit


class PlainTranslator(nn.Module):
    """Encoder-decoder without attention, for the skeleton translator."""

    def __init__(self, width: int = 64):
        super().__init__()
        self.encoder = Encoder(1, width)
        self.decoder = Decoder(width)
        init_weights(self)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class SkeletonTranslator(nn.Module):
    """Cycle-consistent pair translating images to skeleton drawings and
    back, with one patch discriminator per direction."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.img_to_skel = PlainTranslator(width)
        self.skel_to_img = PlainTranslator(width)
        self.disc_skel = Discriminator(width, use_attention=False)
        self.disc_img = Discriminator(width, use_attention=False)

    def forward(self, img):
        return self.img_to_skel(img)

    def generators(self):
        return [self.img_to_skel, self.skel_to_img]

    def discriminators(self):
        return [self.disc_skel, self.disc_img]


def sg_forward(sg: SkeletonTranslator, img: torch.Tensor) -> torch.Tensor:
    """Differentiable image-to-skeleton mapping (gradient flows to ``img``)."""
    return sg.img_to_skel(img)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def module_arrays(modules: dict[str, nn.Module]) -> dict[str, np.ndarray]:
    """Flatten named modules into ``<module>.<param path>`` float arrays."""
    arrays = {}
    for name in sorted(modules):
        for pname, p in modules[name].state_dict().items():
            arrays[f"{name}.{pname}"] = p.detach().cpu().numpy()
    return arrays


def save_checkpoint(
    directory,
    arrays: dict[str, np.ndarray],
    config: dict,
    extras: dict | None = None,
) -> Path:
    """Write one raw little-endian float32 file per array plus a manifest."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        records = []
        for idx, name in enumerate(sorted(arrays)):
            arr = np.asarray(arrays[name], dtype="<f4")
            fname = f"{idx:04d}.bin"
            (d / fname).write_bytes(arr.tobytes(order="C"))
            records.append(
                {
                    "path": name,
                    "shape": list(arr.shape),
                    "dtype": "float32",
                    "file": fname,
                }
            )
        manifest = {"format": 1, "config": config, "params": records}
        if extras:
            manifest["extras"] = extras
        with open(d / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IoError(f"{d}: {e}") from e
    return d


def load_checkpoint(directory, expect_config: dict | None = None):
    """Read a checkpoint directory; returns ``(arrays, config, extras)``.

    Any key in ``expect_config`` must match the recorded configuration.
    """
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise ManifestMismatch(f"no manifest.json under {d}")
    with open(mpath) as f:
        manifest = json.load(f)
    config = manifest.get("config", {})
    if expect_config:
        for key, want in expect_config.items():
            got = config.get(key)
            if got != want:
                raise ManifestMismatch(f"config[{key!r}]: checkpoint has {got!r}, expected {want!r}")
    arrays = {}
    for rec in manifest["params"]:
        raw = (d / rec["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).copy()
        arrays[rec["path"]] = arr
    return arrays, config, manifest.get("extras", {})


def load_module_arrays(modules: dict[str, nn.Module], arrays: dict[str, np.ndarray]) -> None:
    """Load flattened arrays back into modules, validating shapes."""
    for name in sorted(modules):
        module = modules[name]
        state = module.state_dict()
        new_state = {}
        for pname, current in state.items():
            key = f"{name}.{pname}"
            if key not in arrays:
                raise ManifestMismatch(f"checkpoint missing array {key!r}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(current.shape):
                raise ManifestMismatch(
                    f"{key}: checkpoint shape {tuple(arr.shape)} != model {tuple(current.shape)}"
                )
            new_state[pname] = torch.from_numpy(arr).to(current.dtype)
        module.load_state_dict(new_state)


def encode_rng_state(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def decode_rng_state(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())
