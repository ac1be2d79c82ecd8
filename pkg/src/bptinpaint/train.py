"""Head training, block-wise growth stages and resumable checkpointing."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .config import Config
from .engine import NonFiniteError, Tensor, no_grad
from .engine import ops
from .losses import CSV_COLUMNS, LossReport, LossWeights, adv_g, decade_scale, l2_recon, mspal_d, ppl_batch, total_g
from .masking import composite, mask_pyramid, pyramid, sample_mask, stack_masks
from .models import (
    DiscriminatorConfig,
    FeatureStack,
    GeneratorConfig,
    GeneratorNet,
    GrowthState,
    PatchDiscriminator,
    build_discriminators,
    build_generator,
)
from .optim import Adam
from .receptive import patch_labels, rf_map

logger = logging.getLogger(__name__)

DTYPE = np.float32


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    batch_size: int = 4
    lr0: float = 2e-4
    head_iters: int = 2000
    stage_iters: int = 300
    stages: int = 3
    alpha_ramp_fraction: float = 0.5
    ala_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.stage_iters < 1 or self.head_iters < 0 or self.stages < 0:
            raise ValueError("schedule counts must be positive")

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainSchedule":
        return cls(cfg.batch_size, cfg.lr0, cfg.head_iters, cfg.stage_iters, cfg.effective_stages,
                   cfg.alpha_ramp_fraction, cfg.ala_enabled, cfg.seed)

    @property
    def total_iters(self) -> int:
        return self.head_iters + self.stages * self.stage_iters

    def position(self, it: int) -> tuple[int, int]:
        """(stage, iteration within stage) for global iteration ``it``."""
        if it < self.head_iters:
            return 0, it
        k = it - self.head_iters
        return 1 + k // self.stage_iters, k % self.stage_iters

    def alpha(self, stage_iter: int) -> float:
        ramp = max(self.alpha_ramp_fraction * self.stage_iters, 1.0)
        return max(0.0, 1.0 - stage_iter / ramp)

    def lr(self, stage: int) -> float:
        return decade_scale(self.lr0, stage)


def build_models(cfg: Config) -> tuple[GeneratorNet, list[PatchDiscriminator], FeatureStack]:
    gen = build_generator(GeneratorConfig(
        image_size=cfg.image_size, base_width=cfg.base_width, core_blocks=cfg.effective_core_blocks,
        dilation=cfg.dilation, seed=cfg.seed, dtype=DTYPE,
    ))
    ds = build_discriminators(DiscriminatorConfig(
        image_size=cfg.image_size, base_width=cfg.d_base_width, n_strided=cfg.d_strided, seed=cfg.seed, dtype=DTYPE,
    ))
    fs = FeatureStack(seed=cfg.seed, input_extent=cfg.image_size, dtype=DTYPE)
    return gen, ds, fs


def to_network_range(images01: np.ndarray) -> np.ndarray:
    return (images01 * 2.0 - 1.0).astype(DTYPE)


def _disc_input(img: Tensor, m: np.ndarray) -> Tensor:
    return ops.concat([img, Tensor(m.astype(img.dtype))], axis=1)


@dataclass
class ForwardPass:
    x: Tensor
    masks: list
    m: np.ndarray
    pred: Tensor
    comp: Tensor
    real_pyr: list
    fake_pyr: list
    m_pyr: list
    labels: list


def forward_pass(gen: GeneratorNet, rfs, x: Tensor, masks) -> ForwardPass:
    """Generator forward, composite, 3-level pyramids and hole-aware labels."""
    m = stack_masks(masks, x.dtype)
    pred = gen(x, m)
    comp = composite(pred, x, m)
    real_pyr, fake_pyr, m_pyr = pyramid(x), pyramid(comp), mask_pyramid(m)
    labels = [patch_labels(rf, mk).astype(x.dtype) for rf, mk in zip(rfs, m_pyr)]
    return ForwardPass(x, list(masks), m, pred, comp, real_pyr, fake_pyr, m_pyr, labels)


def discriminator_loss(discs, fw: ForwardPass) -> tuple[Tensor, list[Tensor]]:
    d_real = [d(_disc_input(r, mk)) for d, r, mk in zip(discs, fw.real_pyr, fw.m_pyr)]
    d_fake = [d(_disc_input(f.detach(), mk)) for d, f, mk in zip(discs, fw.fake_pyr, fw.m_pyr)]
    per_scale = [mspal_d([r], [f], [q]) for r, f, q in zip(d_real, d_fake, fw.labels)]
    return mspal_d(d_real, d_fake, fw.labels), per_scale


def generator_loss(discs, fs: FeatureStack, fw: ForwardPass, weights: LossWeights, recon: str = "ppl"):
    """``(total, recon_local, recon_global, adv)``; the l2 ablation reports its loss as local."""
    g_fake = [d(_disc_input(f, mk)) for d, f, mk in zip(discs, fw.fake_pyr, fw.m_pyr)]
    adv = adv_g(g_fake, fw.labels)
    if recon == "ppl":
        p_loc, p_glob = ppl_batch(fs, fw.pred, fw.x, fw.masks)
        rec = p_loc + p_glob
    else:
        p_loc = l2_recon(fw.pred, fw.x, fw.m)
        p_glob = Tensor(np.zeros((), fw.x.dtype))
        rec = p_loc
    return total_g(rec, adv, weights), p_loc, p_glob, adv


class Trainer:
    """Owns the networks, optimizers, rng and iteration counter of one run.

    ``data`` is an ``(N, 3, H, W)`` array in [-1, 1].
    """

    def __init__(self, cfg: Config, data: np.ndarray, out_dir: Optional[Path] = None):
        if len(data) == 0:
            raise ValueError("training data is empty")
        if data.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ValueError(f"training images must be 3x{cfg.image_size}x{cfg.image_size}, got {data.shape[1:]}")
        self.cfg = cfg
        self.sched = TrainSchedule.from_config(cfg)
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.gen, self.discs, self.fs = build_models(cfg)
        self.opt_g = Adam(self.gen.parameters())
        self.opt_d = [Adam(d.parameters()) for d in self.discs]
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4_000]))
        self.iter = 0
        self._rf = [rf_map(d.conv_specs(), cfg.image_size // 2**k) for k, d in enumerate(self.discs)]

    # one iteration

    def _sample_batch(self):
        b, ext = self.sched.batch_size, self.cfg.image_size
        idx = self.rng.integers(0, len(self.data), size=b)
        masks = [sample_mask(self.rng, ext, self.cfg.max_holes) for _ in range(b)]
        return Tensor(self.data[idx]), masks

    def _enter_stage(self, stage: int) -> None:
        while self.gen.growth.stage < stage:
            self.gen.add_block()
            self.opt_g = _extend_adam(self.opt_g, self.gen.parameters())
            logger.info("stage %d: added residual block %d", stage, len(self.gen.grown))

    def step(self) -> LossReport:
        stage, stage_iter = self.sched.position(self.iter)
        self._enter_stage(stage)
        alpha = self.sched.alpha(stage_iter) if stage > 0 else self.gen.growth.alpha
        if stage > 0:
            self.gen.growth = GrowthState(stage, alpha, stage_iter)
        lr = self.sched.lr(stage)
        weights = LossWeights(self.cfg.lambda_ppl, self.cfg.lambda_adv, stage, self.sched.ala_enabled)

        x, masks = self._sample_batch()
        fw = forward_pass(self.gen, self._rf, x, masks)

        # discriminator update on detached composites
        for d in self.discs:
            d.requires_grad_(True)
            d.zero_grad()
        loss_d, per_scale_d = discriminator_loss(self.discs, fw)
        loss_d.backward()
        for opt in self.opt_d:
            opt.step(lr)

        # generator update; discriminators frozen so they collect no gradient
        for d in self.discs:
            d.requires_grad_(False)
            d.zero_grad()
        self.gen.zero_grad()
        loss_g, p_loc, p_glob, adv = generator_loss(self.discs, self.fs, fw, weights, self.cfg.recon_loss)
        loss_g.backward()
        self.opt_g.step(lr)
        for d in self.discs:
            d.requires_grad_(True)
        no_fake = not any((q == 0).any() for q in fw.labels)

        report = LossReport(
            iter=self.iter, stage=stage, alpha=alpha,
            ppl_local=p_loc.item(), ppl_global=p_glob.item(), adv_g=adv.item(),
            adv_d=[t.item() for t in per_scale_d], total_g=loss_g.item(),
            lambda_adv=weights.lambda_adv_current, lr=lr, no_fake_cells=no_fake,
        )
        report.check_finite()
        if stage > 0 and stage_iter == self.sched.stage_iters - 1:
            # stage complete: skip path fully faded out
            self.gen.growth = GrowthState(stage, 0.0, self.sched.stage_iters)
        self.iter += 1
        return report

    # loops

    def train_until(self, end: int, csv_path: Optional[Path] = None, checkpoint_dir: Optional[Path] = None) -> None:
        """Run iterations up to global iteration ``end``.

        Checkpoints are written whenever the head or a growth stage finishes.
        """
        end = min(end, self.sched.total_iters)
        writer, fh = None, None
        if csv_path is not None:
            fh, writer = self._open_csv(Path(csv_path))
        try:
            while self.iter < end:
                try:
                    report = self.step()
                except (NonFiniteError, FloatingPointError) as exc:
                    self._dump_diverged(checkpoint_dir)
                    raise TrainingDiverged(f"iteration {self.iter}: {exc}") from exc
                if writer is not None:
                    writer.writerow(report.row())
                if checkpoint_dir is not None and self.at_stage_boundary():
                    stage = self.sched.position(self.iter - 1)[0]
                    self.save(Path(checkpoint_dir) / f"stage{stage}.bpti")
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_dir is not None:
            self.save(Path(checkpoint_dir) / "latest.bpti")

    def at_stage_boundary(self) -> bool:
        if self.iter == self.sched.head_iters:
            return True
        return self.iter > self.sched.head_iters and (self.iter - self.sched.head_iters) % self.sched.stage_iters == 0

    def run(self, csv_path=None, checkpoint_dir=None) -> GeneratorNet:
        self.train_until(self.sched.total_iters, csv_path, checkpoint_dir)
        return self.gen

    def _open_csv(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = self.iter == 0 or not path.exists()
        fh = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            fh.write("# " + json.dumps(self.metadata(), sort_keys=True) + "\n")
            writer.writerow(CSV_COLUMNS)
        return fh, writer

    def metadata(self) -> dict:
        meta = dict(self.cfg.ablation_tags())
        meta.update(seed=self.cfg.seed, head_iters=self.sched.head_iters, stage_iters=self.sched.stage_iters,
                    stages=self.sched.stages, core_blocks=self.gen.cfg.core_blocks)
        return meta

    def _dump_diverged(self, checkpoint_dir) -> None:
        if checkpoint_dir is None:
            return
        path = Path(checkpoint_dir) / "diverged.bpti"
        try:
            self.save(path)
            logger.error("non-finite loss; state dumped to %s", path)
        except Exception:  # the dump must not mask the original failure
            logger.exception("could not write diverged-state dump")

    # checkpoint state

    def sections(self) -> checkpoint.Sections:
        params = {f"g.{k}": v for k, v in self.gen.state_dict().items()}
        for i, d in enumerate(self.discs):
            params.update({f"d{i}.{k}": v for k, v in d.state_dict().items()})
        params.update({f"fs.w{i}": w for i, w in enumerate(self.fs.layer_weights)})
        opt = self.opt_g.state("g.")
        for i, o in enumerate(self.opt_d):
            opt.update(o.state(f"d{i}."))
        g = self.gen.growth
        growth = {
            "stage": np.array(g.stage, np.int64),
            "alpha": np.array(g.alpha, np.float64),
            "stage_iter": np.array(g.stage_iter, np.int64),
            "iter": np.array(self.iter, np.int64),
        }
        rng = {"pcg64": np.frombuffer(json.dumps(self.rng.bit_generator.state, sort_keys=True).encode(), np.uint8)}
        config = {"json": np.frombuffer(checkpoint_config_json(self.cfg).encode(), np.uint8)}
        return {"config": config, "params": params, "optimizer": opt, "growth": growth, "rng": rng}

    def save(self, path) -> None:
        checkpoint.save(path, self.sections())

    @classmethod
    def from_sections(cls, sections: checkpoint.Sections, data: np.ndarray, **paths) -> "Trainer":
        cfg = config_from_sections(sections, **paths)
        tr = cls(cfg, data)
        growth = sections["growth"]
        stage = int(growth["stage"])
        for _ in range(stage):
            tr.gen.add_block()
        tr.opt_g = Adam(tr.gen.parameters())
        tr.gen.growth = GrowthState(stage, float(growth["alpha"]), int(growth["stage_iter"]))
        tr.iter = int(growth["iter"])
        params = sections["params"]
        tr.gen.load_state_dict({k[2:]: v for k, v in params.items() if k.startswith("g.")})
        for i, d in enumerate(tr.discs):
            p = f"d{i}."
            d.load_state_dict({k[len(p):]: v for k, v in params.items() if k.startswith(p)})
        tr.fs.set_layer_weights([params[f"fs.w{i}"] for i in range(tr.fs.n_layers)])
        tr.opt_g.load_state(sections["optimizer"], "g.")
        for i, o in enumerate(tr.opt_d):
            o.load_state(sections["optimizer"], f"d{i}.")
        tr.rng.bit_generator.state = json.loads(bytes(sections["rng"]["pcg64"]).decode())
        return tr

    @classmethod
    def load(cls, path, data: np.ndarray, **paths) -> "Trainer":
        return cls.from_sections(checkpoint.load(path), data, **paths)


PATH_KEYS = ("data_dir", "out_dir")


def checkpoint_config_json(cfg: Config) -> str:
    """Config as stored in checkpoints: run-location paths are left out so that
    identical runs in different directories write identical files."""
    d = {k: v for k, v in cfg.to_dict().items() if k not in PATH_KEYS}
    return json.dumps(d, indent=2) + "\n"


def config_from_sections(sections: checkpoint.Sections, **paths) -> Config:
    cfg = Config.from_json(bytes(sections["config"]["json"]).decode())
    return cfg.with_overrides(**paths)


def _extend_adam(opt: Adam, params) -> Adam:
    """Carry moments for existing parameters over to an optimizer covering ``params``."""
    new = Adam(params, (opt.beta1, opt.beta2), opt.eps)
    new.t = opt.t
    old = {id(p): (m, v) for p, m, v in zip(opt.params, opt.m, opt.v)}
    for i, p in enumerate(new.params):
        if id(p) in old:
            new.m[i], new.v[i] = old[id(p)]
    return new


def load_generator(path) -> GeneratorNet:
    """Generator from a checkpoint, in eval mode."""
    sections = checkpoint.load(path)
    gen, _, _ = build_models(config_from_sections(sections))
    growth = sections["growth"]
    for _ in range(int(growth["stage"])):
        gen.add_block()
    gen.growth = GrowthState(int(growth["stage"]), float(growth["alpha"]), int(growth["stage_iter"]))
    params = sections["params"]
    gen.load_state_dict({k[2:]: v for k, v in params.items() if k.startswith("g.")})
    return gen.eval()


def predict(gen: GeneratorNet, images: np.ndarray, masks: np.ndarray, batch: int = 16) -> np.ndarray:
    """Composited outputs for ``images`` in [-1, 1] and N1HW ``masks``."""
    out = np.empty_like(images)
    with no_grad():
        for s in range(0, len(images), batch):
            x = Tensor(images[s:s + batch].astype(DTYPE))
            m = masks[s:s + batch].astype(DTYPE)
            out[s:s + batch] = composite(gen(x, m), x, m).data
    return out
