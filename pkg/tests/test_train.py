import csv

import numpy as np
import pytest

from bptinpaint import checkpoint
from bptinpaint.config import Config
from bptinpaint.engine import Tensor, no_grad
from bptinpaint.engine.gradcheck import check_gradients
from bptinpaint.losses import LossWeights
from bptinpaint.masking import Box, HoleMask
from bptinpaint.models import (
    DiscriminatorConfig,
    FeatureStack,
    GeneratorConfig,
    build_discriminators,
    build_generator,
    parameter_checksum,
)
from bptinpaint.receptive import rf_map
from bptinpaint.train import (
    TrainSchedule,
    Trainer,
    TrainingDiverged,
    discriminator_loss,
    forward_pass,
    generator_loss,
    load_generator,
)


def tiny_cfg(**kw):
    base = dict(image_size=16, base_width=4, core_blocks=1, d_base_width=4, d_strided=1,
                batch_size=2, head_iters=3, stage_iters=2, stages=3, seed=11)
    base.update(kw)
    return Config(**base)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    return rng.uniform(-1, 1, (6, 3, 16, 16)).astype(np.float32)


def read_rows(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("# ")
    return list(csv.DictReader(lines[1:]))


def test_schedule_positions_alpha_lr():
    s = TrainSchedule(head_iters=5, stage_iters=4, stages=3, alpha_ramp_fraction=0.5)
    assert s.total_iters == 17
    assert [s.position(i) for i in (0, 4, 5, 8, 9, 16)] == [(0, 0), (0, 4), (1, 0), (1, 3), (2, 0), (3, 3)]
    assert [s.alpha(t) for t in range(4)] == [1.0, 0.5, 0.0, 0.0]
    assert [s.lr(i) for i in range(4)] == [2e-4, 2e-5, 2e-6, 2e-7]


def test_zero_iterations_keep_initialization(tmp_path, data):
    cfg = tiny_cfg()
    tr = Trainer(cfg, data)
    fresh = parameter_checksum(Trainer(cfg, data).gen)
    tr.train_until(0, checkpoint_dir=tmp_path)
    assert parameter_checksum(tr.gen) == fresh
    assert parameter_checksum(load_generator(tmp_path / "latest.bpti")) == fresh


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        Trainer(tiny_cfg(), np.zeros((0, 3, 16, 16), np.float32))


def test_schedule_conformance_in_csv(tmp_path, data):
    tr = Trainer(tiny_cfg(), data)
    tr.run(csv_path=tmp_path / "loss.csv")
    rows = read_rows(tmp_path / "loss.csv")
    assert len(rows) == 9
    seen = {}
    for r in rows:
        seen.setdefault(int(r["stage"]), set()).add((float(r["lr"]), float(r["lambda_adv"])))
    assert seen == {0: {(2e-4, 1.0)}, 1: {(2e-5, 0.1)}, 2: {(2e-6, 0.01)}, 3: {(2e-7, 0.001)}}
    alphas = [float(r["alpha"]) for r in rows if r["stage"] == "2"]
    assert alphas == [1.0, 0.0]
    assert tr.gen.growth.stage == 3 and tr.gen.growth.alpha == 0.0 and len(tr.gen.grown) == 3


def test_ala_off_keeps_weight(tmp_path, data):
    tr = Trainer(tiny_cfg(ala="off"), data)
    tr.run(csv_path=tmp_path / "loss.csv")
    assert {float(r["lambda_adv"]) for r in read_rows(tmp_path / "loss.csv")} == {1.0}


def test_alpha_trajectory_long_stage(tmp_path, data):
    tr = Trainer(tiny_cfg(head_iters=0, stage_iters=6, stages=1), data)
    tr.run(csv_path=tmp_path / "loss.csv")
    alphas = [float(r["alpha"]) for r in read_rows(tmp_path / "loss.csv")]
    assert alphas[0] == 1.0 and alphas[3:] == [0.0, 0.0, 0.0]
    assert all(a >= b for a, b in zip(alphas, alphas[1:]))


def test_runs_are_deterministic(tmp_path, data):
    for name in ("a", "b"):
        Trainer(tiny_cfg(), data).run(csv_path=tmp_path / name / "loss.csv", checkpoint_dir=tmp_path / name)
    for f in ("loss.csv", "stage0.bpti", "stage2.bpti", "latest.bpti"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_resume_mid_stage_matches_uninterrupted(tmp_path, data):
    full = Trainer(tiny_cfg(), data)
    full.run()
    part = Trainer(tiny_cfg(), data)
    part.train_until(6)
    part.save(tmp_path / "mid.bpti")
    resumed = Trainer.load(tmp_path / "mid.bpti", data)
    assert resumed.iter == 6
    resumed.run()
    assert parameter_checksum(resumed.gen) == parameter_checksum(full.gen)
    for a, b in zip(resumed.discs, full.discs):
        assert parameter_checksum(a) == parameter_checksum(b)


def test_save_load_save_byte_identical(tmp_path, data):
    tr = Trainer(tiny_cfg(), data)
    tr.train_until(5)
    tr.save(tmp_path / "a.bpti")
    Trainer.load(tmp_path / "a.bpti", data).save(tmp_path / "b.bpti")
    assert (tmp_path / "a.bpti").read_bytes() == (tmp_path / "b.bpti").read_bytes()


def test_stage_checkpoint_growth_continuity(tmp_path, data):
    tr = Trainer(tiny_cfg(), data)
    tr.train_until(3, checkpoint_dir=tmp_path)
    gen = load_generator(tmp_path / "stage0.bpti")
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(-1, 1, (3, 3, 16, 16)).astype(np.float32))
    m = np.zeros((3, 1, 16, 16), np.float32)
    m[:, :, 3:9, 5:12] = 1
    with no_grad():
        before = gen(x, m).data.copy()
        gen.add_block()
        after = gen(x, m).data
    assert np.max(np.abs(after - before)) < 1e-5


def test_direct_ablation_builds_final_depth(data):
    tr = Trainer(tiny_cfg(procedural="off", core_blocks=9), data)
    assert len(tr.gen.core) == 12 and tr.sched.stages == 0 and tr.sched.total_iters == 3


def test_nonfinite_aborts_with_dump(tmp_path, data):
    tr = Trainer(tiny_cfg(), data)
    tr.gen.out.weight.data[...] = np.nan
    with pytest.raises(TrainingDiverged):
        tr.train_until(2, checkpoint_dir=tmp_path)
    assert (tmp_path / "diverged.bpti").exists()
    assert checkpoint.load(tmp_path / "diverged.bpti")["growth"]["iter"] == 0


def test_full_loss_graph_gradients():
    """Generator and discriminator objectives against central differences (double precision)."""
    gen = build_generator(GeneratorConfig(image_size=16, base_width=4, core_blocks=1, seed=2, dtype=np.float64))
    gen.add_block()
    gen.growth.alpha = 0.6
    discs = build_discriminators(DiscriminatorConfig(image_size=16, base_width=4, n_strided=1, seed=2,
                                                     dtype=np.float64))
    fs = FeatureStack(seed=2, input_extent=16, dtype=np.float64)
    rfs = [rf_map(d.conv_specs(), 16 // 2**k) for k, d in enumerate(discs)]
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    masks = [HoleMask.from_rects(16, [Box(2, 3, 6, 7)]), HoleMask.from_rects(16, [Box(8, 6, 5, 8), Box(1, 1, 3, 3)])]
    weights = LossWeights(stage=1)

    def g_obj():
        return generator_loss(discs, fs, forward_pass(gen, rfs, x, masks), weights)[0]

    def d_obj():
        return discriminator_loss(discs, forward_pass(gen, rfs, x, masks))[0]

    g_params = [gen.front[0].conv.weight, gen.core[0].conv1.weight, gen.grown[0].conv2.weight,
                gen.back[2].bn.gamma, gen.out.weight, gen.out.bias]
    errs = check_gradients(g_obj, g_params, eps=1e-6, max_entries=12, rng=np.random.default_rng(0))
    assert max(errs.values()) < 1e-5, errs
    d_params = [p for d in discs for p in d.parameters()]
    errs = check_gradients(d_obj, d_params, eps=1e-6, max_entries=12, rng=np.random.default_rng(1))
    assert max(errs.values()) < 1e-5, errs
