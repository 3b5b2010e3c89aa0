"""Two-phase training: pretrain the skeleton translator as a cycle pair,
then jointly train the forward/backward generators and both
discriminators under the weighted composite objective.

Runs are deterministic under a fixed seed: model init is seeded, batch
order and flips are pure functions of (seed, epoch, step), and resuming
from a checkpoint reproduces the next step bit-identically.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .data import TrainingBatch, epoch_seed, next_batch
from .errors import ConfigError, ExhaustedSplit, ManifestMismatch, NonFiniteLoss
from .losses import (
    LossBreakdown,
    LossWeights,
    adv_image,
    adv_skeleton,
    cls_loss,
    l1_pixel,
    skeleton_consistency,
    total_objective,
)
from .networks import (
    Discriminator,
    Generator,
    SkeletonTranslator,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
    sg_forward,
)

__all__ = [
    "TrainConfig",
    "desk_profile",
    "paper_profile",
    "lr_at",
    "Trainer",
    "SgTrainer",
    "pretrain_sg",
    "sg_dev_l1",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    base_lr: float = 1e-4
    lr_warm_epochs: int = 8
    lr_decay_interval: int = 5
    betas: tuple = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    adv_form: str = "lsgan"
    seed: int = 0
    image_size: int = 256
    channels: int = 64
    sg_channels: int = 32
    checkpoint_every: int = 1
    allow_unpaired: bool = False
    use_skeleton: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.lr_warm_epochs < 0 or self.lr_decay_interval < 1:
            raise ConfigError("bad lr schedule parameters")
        if self.image_size % 4 != 0:
            raise ConfigError("image_size must be divisible by 4")
        if self.adv_form not in ("lsgan", "bce"):
            raise ConfigError(f"adv_form must be lsgan or bce, got {self.adv_form!r}")

    def fingerprint(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "sg_channels": self.sg_channels,
            "use_skeleton": self.use_skeleton,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)


def desk_profile(**overrides) -> TrainConfig:
    """Small CPU-friendly settings: 64x64 images, 64-wide bottleneck,
    5 epochs. Uses stronger momentum than the published schedule: at batch
    size 1 on CPU step budgets, beta1=0.5 leaves visible structure
    unlearned."""
    base = dict(epochs=5, image_size=64, channels=64, sg_channels=32,
                base_lr=2e-4, betas=(0.9, 0.999))
    base.update(overrides)
    return TrainConfig(**base)


def paper_profile(**overrides) -> TrainConfig:
    """Full-scale published settings: 256x256, 100 epochs, lr 1e-4."""
    base = dict(epochs=100, image_size=256, channels=256, sg_channels=64, base_lr=1e-4)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise-constant learning rate.

    base_lr for the first ``lr_warm_epochs`` epochs; afterwards a
    staircase stepping every ``lr_decay_interval`` epochs along the line
    from base_lr at the end of warmup to zero at ``epochs``:

        k  = (epoch - warm) // interval
        lr = base_lr * max(0, 1 - (k + 1) * interval / (epochs - warm))

    Never negative; non-increasing after warmup.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    warm = cfg.lr_warm_epochs
    if epoch < warm or cfg.epochs <= warm:
        return cfg.base_lr
    span = cfg.epochs - warm
    k = (epoch - warm) // cfg.lr_decay_interval
    frac = 1.0 - (k + 1) * cfg.lr_decay_interval / span
    return cfg.base_lr * max(0.0, frac)


def _batch_tensors(batch: TrainingBatch, dtype=torch.float32):
    def t(a):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dtype).unsqueeze(0).unsqueeze(0)

    return t(batch.x_img), t(batch.x_skel), t(batch.y_img), t(batch.y_skel)


def _check_params_finite(modules) -> None:
    for m in modules:
        for p in m.parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteLoss("parameter became NaN/inf after the update")


def _named_params(module: torch.nn.Module, prefix: str):
    names, params = [], []
    for n, p in module.named_parameters():
        names.append(f"{prefix}.{n}")
        params.append(p)
    return names, params


def _optimizer_arrays(opt, names, params, prefix) -> tuple[dict, dict]:
    arrays, steps = {}, {}
    for name, p in zip(names, params):
        st = opt.state.get(p)
        if not st:
            continue
        arrays[f"{prefix}.{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        arrays[f"{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
        steps[name] = float(st["step"])
    return arrays, steps


def _load_optimizer_arrays(opt, names, params, arrays, steps, prefix) -> None:
    for name, p in zip(names, params):
        k1, k2 = f"{prefix}.{name}.exp_avg", f"{prefix}.{name}.exp_avg_sq"
        if k1 not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(steps[name])),
            "exp_avg": torch.from_numpy(arrays[k1].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[k2].copy()).to(p.dtype),
        }


class Trainer:
    """Joint phase: generators, attention heads, and both discriminators.

    The skeleton translator is frozen on entry. Each step runs one
    discriminator update on detached fakes, then one generator update on
    the full composite; the returned breakdown is the generator-side
    objective. Terms whose weight is zero are skipped entirely.
    """

    def __init__(self, cfg: TrainConfig, sg: SkeletonTranslator):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.gen_f = Generator(cfg.channels, cfg.use_skeleton)
        self.gen_b = Generator(cfg.channels, cfg.use_skeleton)
        self.disc_i = Discriminator(cfg.channels, use_attention=True)
        self.disc_s = Discriminator(cfg.channels, use_attention=False)
        self.sg = sg
        self.sg.requires_grad_(False)
        self.sg.eval()

        self._g_names, self._g_params = [], []
        for prefix, m in (("gen_f", self.gen_f), ("gen_b", self.gen_b)):
            n, p = _named_params(m, prefix)
            self._g_names += n
            self._g_params += p
        self._d_names, self._d_params = [], []
        for prefix, m in (("disc_i", self.disc_i), ("disc_s", self.disc_s)):
            n, p = _named_params(m, prefix)
            self._d_names += n
            self._d_params += p
        self.opt_g = torch.optim.Adam(self._g_params, lr=cfg.base_lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self._d_params, lr=cfg.base_lr, betas=cfg.betas)
        self.step_count = 0
        self.epoch = 0

    def set_epoch(self, epoch: int) -> float:
        self.epoch = epoch
        lr = lr_at(self.cfg, epoch)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    @property
    def lr(self) -> float:
        return self.opt_g.param_groups[0]["lr"]

    def _generator_cls(self, x_img, x_skel, y_img, y_skel) -> torch.Tensor:
        """Domain-classification terms of every generator-side head: each
        head sees one source-domain and one target-domain encoding."""
        terms = []
        for logit in self.gen_f.domain_logits(x_img, x_skel):
            terms.append(cls_loss(logit, "source"))
        for logit in self.gen_f.domain_logits(y_img, y_skel):
            terms.append(cls_loss(logit, "target"))
        for logit in self.gen_b.domain_logits(y_img, y_skel):
            terms.append(cls_loss(logit, "target"))
        for logit in self.gen_b.domain_logits(x_img, x_skel):
            terms.append(cls_loss(logit, "source"))
        return sum(terms)

    def train_step(self, batch: TrainingBatch) -> LossBreakdown:
        cfg = self.cfg
        w = cfg.weights
        x_img, x_skel, y_img, y_skel = _batch_tensors(batch)
        use_adv = w.lambda1 > 0
        use_cycle = w.lambda2 > 0
        use_cls = w.lambda3 > 0
        use_content = w.lambda4 > 0 and batch.paired

        fake_y = self.gen_f(x_img, x_skel)
        fake_x = self.gen_b(y_img, y_skel)

        # discriminator update on detached fakes
        if use_adv or use_cls:
            self.opt_d.zero_grad(set_to_none=True)
            d_adv_i = d_adv_s = d_cls = 0.0
            if use_adv:
                d_adv_i = adv_image(self.disc_i, y_img, fake_y, "discriminator", cfg.adv_form)
                d_adv_s = adv_skeleton(self.disc_s, self.sg, y_img, fake_y,
                                       "discriminator", cfg.adv_form)
            if use_cls:
                _, logit_real = self.disc_i(y_img)
                _, logit_fake = self.disc_i(fake_y.detach())
                d_cls = cls_loss(logit_real, "target") + cls_loss(logit_fake, "source")
            d_breakdown = total_objective(w, adv_i=d_adv_i, adv_s=d_adv_s, cls=d_cls)
            d_breakdown.total.backward()
            self.opt_d.step()

        # generator update
        self.opt_g.zero_grad(set_to_none=True)
        pix = sc = cycle = cls = adv_i = adv_s = 0.0
        if use_content:
            pix = l1_pixel(fake_y, y_img) + l1_pixel(fake_x, x_img)
            sc = (skeleton_consistency(self.sg, fake_y, y_img)
                  + skeleton_consistency(self.sg, fake_x, x_img))
        if use_cycle:
            recon_x = self.gen_b(fake_y, sg_forward(self.sg, fake_y))
            recon_y = self.gen_f(fake_x, sg_forward(self.sg, fake_x))
            cycle = l1_pixel(recon_x, x_img) + l1_pixel(recon_y, y_img)
        if use_cls:
            cls = self._generator_cls(x_img, x_skel, y_img, y_skel)
        if use_adv:
            adv_i = adv_image(self.disc_i, y_img, fake_y, "generator", cfg.adv_form)
            adv_s = adv_skeleton(self.disc_s, self.sg, y_img, fake_y,
                                 "generator", cfg.adv_form)
        breakdown = total_objective(w, pix=pix, sc=sc, cycle=cycle, cls=cls,
                                    adv_i=adv_i, adv_s=adv_s)
        if torch.is_tensor(breakdown.total):
            breakdown.total.backward()
            self.opt_g.step()
        _check_params_finite((self.gen_f, self.gen_b, self.disc_i, self.disc_s))
        self.step_count += 1
        return breakdown.to_floats()

    # -- checkpointing ------------------------------------------------------

    def _modules(self) -> dict:
        return {
            "gen_f": self.gen_f,
            "gen_b": self.gen_b,
            "disc_i": self.disc_i,
            "disc_s": self.disc_s,
            "sg": self.sg,
        }

    def save(self, directory) -> Path:
        arrays = module_arrays(self._modules())
        g_arr, g_steps = _optimizer_arrays(self.opt_g, self._g_names, self._g_params, "opt_g")
        d_arr, d_steps = _optimizer_arrays(self.opt_d, self._d_names, self._d_params, "opt_d")
        arrays.update(g_arr)
        arrays.update(d_arr)
        extras = {
            "step": self.step_count,
            "epoch": self.epoch,
            "opt_g_steps": g_steps,
            "opt_d_steps": d_steps,
            "sg_frozen": True,
            "seed": self.cfg.seed,
        }
        return save_checkpoint(directory, arrays, self.cfg.fingerprint(), extras)

    def load(self, directory) -> None:
        arrays, _, extras = load_checkpoint(directory, expect_config=self.cfg.fingerprint())
        load_module_arrays(self._modules(), arrays)
        _load_optimizer_arrays(self.opt_g, self._g_names, self._g_params,
                               arrays, extras.get("opt_g_steps", {}), "opt_g")
        _load_optimizer_arrays(self.opt_d, self._d_names, self._d_params,
                               arrays, extras.get("opt_d_steps", {}), "opt_d")
        self.step_count = int(extras.get("step", 0))
        self.epoch = int(extras.get("epoch", 0))
        self.sg.requires_grad_(False)
        self.sg.eval()


# ---------------------------------------------------------------------------
# skeleton-translator pretraining
# ---------------------------------------------------------------------------

SG_ADV_WEIGHT = 1.0
SG_CYCLE_WEIGHT = 10.0


class SgTrainer:
    """Cycle pair between character images and their thinned skeletons."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed + 9001)
        self.sg = SkeletonTranslator(cfg.sg_channels)
        g_params = [p for m in self.sg.generators() for p in m.parameters()]
        d_params = [p for m in self.sg.discriminators() for p in m.parameters()]
        self.opt_g = torch.optim.Adam(g_params, lr=cfg.base_lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(d_params, lr=cfg.base_lr, betas=cfg.betas)

    def step(self, img: torch.Tensor, skel: torch.Tensor) -> dict:
        sg, form = self.sg, self.cfg.adv_form
        fake_sk = sg.img_to_skel(img)
        fake_im = sg.skel_to_img(skel)

        self.opt_d.zero_grad(set_to_none=True)
        d_loss = (adv_image(sg.disc_skel, skel, fake_sk, "discriminator", form)
                  + adv_image(sg.disc_img, img, fake_im, "discriminator", form))
        d_loss.backward()
        self.opt_d.step()

        self.opt_g.zero_grad(set_to_none=True)
        g_adv = (adv_image(sg.disc_skel, skel, fake_sk, "generator", form)
                 + adv_image(sg.disc_img, img, fake_im, "generator", form))
        g_cyc = (l1_pixel(sg.skel_to_img(fake_sk), img)
                 + l1_pixel(sg.img_to_skel(fake_im), skel))
        g_loss = SG_ADV_WEIGHT * g_adv + SG_CYCLE_WEIGHT * g_cyc
        if not torch.isfinite(g_loss):
            raise NonFiniteLoss("skeleton-translator loss diverged")
        g_loss.backward()
        self.opt_g.step()
        _check_params_finite((self.sg,))
        return {"d": float(d_loss.detach()), "adv": float(g_adv.detach()),
                "cycle": float(g_cyc.detach())}


def sg_dev_l1(sg: SkeletonTranslator, root, entries, split: str = "dev") -> float:
    """Mean L1 between the translator's output and the cached thinned
    skeleton over one split (images of every style)."""
    root = Path(root)
    rows = [e for e in entries if e.split == split]
    if not rows:
        raise ConfigError(f"split {split!r} is empty")
    total = 0.0
    with torch.no_grad():
        for e in sorted(rows, key=lambda r: (r.style, r.char_id)):
            img = data_mod._load_gray(root / e.path)
            skel = data_mod._load_gray(root / data_mod.SKELETON_DIR / e.path)
            x = torch.from_numpy(img).float()[None, None]
            t = torch.from_numpy(skel).float()[None, None]
            total += float(l1_pixel(sg_forward(sg, x), t))
    return total / len(rows)


def pretrain_sg(cfg: TrainConfig, root, entries, out_dir=None,
                log_cb=None, stop_at_improvement: float | None = None
                ) -> tuple[SkeletonTranslator, list]:
    """Train the skeleton translator on (image, thinned skeleton) pairs.

    Walks the train split for ``cfg.epochs`` epochs; saves a checkpoint per
    epoch when ``out_dir`` is given (retained on divergence aborts). With
    ``stop_at_improvement=f``, stops early once dev L1 has dropped by that
    fraction of its initial value. Returns the trained translator and the
    per-epoch dev-L1 history.
    """
    root = Path(root)
    n = data_mod.epoch_length(entries, "train")
    if n == 0:
        raise ConfigError("no training pairs for skeleton pretraining")
    trainer = SgTrainer(cfg)
    history = [sg_dev_l1(trainer.sg, root, entries)]
    for epoch in range(cfg.epochs):
        es = epoch_seed(cfg.seed, epoch)
        step = 0
        while True:
            try:
                batch = next_batch(root, entries, "train", es, step)
            except ExhaustedSplit:
                break
            x_img, x_skel, _, _ = _batch_tensors(batch)
            stats = trainer.step(x_img, x_skel)
            if log_cb:
                log_cb(epoch, step, stats)
            step += 1
        history.append(sg_dev_l1(trainer.sg, root, entries))
        if out_dir is not None:
            save_checkpoint(
                Path(out_dir),
                module_arrays({"sg": trainer.sg}),
                {"sg_channels": cfg.sg_channels, "image_size": cfg.image_size},
                {"epoch": epoch, "dev_l1": history[-1]},
            )
        if (stop_at_improvement is not None
                and history[-1] <= history[0] * (1.0 - stop_at_improvement)):
            break
    return trainer.sg, history


def load_sg(directory, cfg: TrainConfig) -> SkeletonTranslator:
    """Load a pretrained skeleton translator and freeze it."""
    arrays, _, _ = load_checkpoint(directory, expect_config={"sg_channels": cfg.sg_channels})
    sg = SkeletonTranslator(cfg.sg_channels)
    load_module_arrays({"sg": sg}, arrays)
    sg.requires_grad_(False)
    sg.eval()
    return sg


def load_for_inference(directory) -> dict:
    """Rebuild the forward generator (and friends) from a joint-phase
    checkpoint; everything comes back frozen in eval mode."""
    arrays, config, extras = load_checkpoint(directory)
    for key in ("image_size", "channels", "sg_channels", "use_skeleton"):
        if key not in config:
            raise ManifestMismatch(f"{directory}: manifest lacks config key {key!r}")
    gen_f = Generator(config["channels"], config["use_skeleton"])
    gen_b = Generator(config["channels"], config["use_skeleton"])
    sg = SkeletonTranslator(config["sg_channels"])
    load_module_arrays({"gen_f": gen_f, "gen_b": gen_b, "sg": sg}, arrays)
    for m in (gen_f, gen_b, sg):
        m.requires_grad_(False)
        m.eval()
    return {"gen_f": gen_f, "gen_b": gen_b, "sg": sg, "config": config, "extras": extras}


# ---------------------------------------------------------------------------
# joint training loop
# ---------------------------------------------------------------------------

def train(cfg: TrainConfig, root, entries, sg: SkeletonTranslator, out_dir,
          max_steps: int | None = None, log_cb=None) -> Trainer:
    """Run the joint phase, writing an ND-JSON loss log and per-epoch
    checkpoints under ``out_dir``."""
    root = Path(root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, sg)
    log_path = out / "train_log.ndjson"
    t0 = time.monotonic()
    with open(log_path, "w") as log:
        done = False
        for epoch in range(cfg.epochs):
            lr = trainer.set_epoch(epoch)
            es = epoch_seed(cfg.seed, epoch)
            step_in_epoch = 0
            while True:
                try:
                    batch = next_batch(root, entries, "train", es, step_in_epoch,
                                       allow_unpaired=cfg.allow_unpaired)
                except ExhaustedSplit:
                    break
                breakdown = trainer.train_step(batch)
                record = {"step": trainer.step_count, "epoch": epoch, "lr": lr}
                record.update(breakdown.as_dict())
                log.write(json.dumps(record) + "\n")
                if log_cb:
                    log_cb(record)
                step_in_epoch += 1
                if max_steps is not None and trainer.step_count >= max_steps:
                    done = True
                    break
            if (epoch + 1) % cfg.checkpoint_every == 0 or done or epoch == cfg.epochs - 1:
                trainer.save(out / "checkpoints" / f"epoch_{epoch + 1:04d}")
            if done:
                break
    (out / "train_summary.json").write_text(json.dumps({
        "steps": trainer.step_count,
        "epochs_run": trainer.epoch + 1,
        "seconds": round(time.monotonic() - t0, 3),
    }, indent=1) + "\n")
    return trainer
