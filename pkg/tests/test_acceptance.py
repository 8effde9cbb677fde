"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`.  The small-scale overfit
criterion trains a model from scratch and is the long pole (tens of minutes
on CPU); everything else completes in seconds to a couple of minutes.
"""
import math
import time

import numpy as np
import pytest
import torch

from medflowseg.cli import main as cli_main
from medflowseg.data import (
    MaskEncoding,
    SyntheticSpec,
    decode_mask,
    encode_mask,
    generate_synthetic,
    load_dataset,
)
from medflowseg.dbsa import DualBranchSpatialAttention
from medflowseg.fa_attention import (
    CrossAttention,
    FAConfig,
    NeuralModulator,
    TokenSequence,
    from_frequency,
    tdx_cues,
    to_frequency,
)
from medflowseg.flow import (
    Endpoints,
    euler_integrate,
    interpolate,
    target_velocity,
    velocity_loss,
)
from medflowseg.losses import LossWeights, ce_loss, dice_loss, total_loss
from medflowseg.metrics import dice, evaluate_pair, hd95, iou
from medflowseg.networks import BackboneConfig, parameter_count
from medflowseg.sampling import (
    OracleVelocityModel,
    SamplerConfig,
    sample_ensemble,
    sample_once,
    staple_fuse,
)
from medflowseg.training import TrainConfig, Trainer, build_model

from oracles import (
    dice_bruteforce,
    hd95_bruteforce,
    iou_bruteforce,
    staple_bruteforce,
)


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"\n[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


def test_criterion_1_oracle_transport():
    start = time.time()
    enc = MaskEncoding(3)
    g = torch.Generator().manual_seed(0)
    labels = torch.randint(0, 3, (64, 64), generator=g)
    x1 = encode_mask(labels, enc)
    worst = 0.0
    for steps in (1, 5, 50):
        x0 = torch.randn(1, 3, 64, 64, generator=g)
        out = euler_integrate(lambda x, t: (x1[None] - x0), x0, steps)
        worst = max(worst, (out - x1[None]).abs().max().item())
        assert torch.equal(decode_mask(out, enc)[0], labels)
        oracle = OracleVelocityModel(x1)
        image = torch.randn(1, 64, 64, generator=g)
        decoded = sample_once(oracle, image, enc, SamplerConfig(steps=steps, seed=steps))
        assert torch.equal(decoded, labels)
    elapsed = time.time() - start
    report(
        "criterion 1 (oracle transport)",
        worst <= 1e-5 and elapsed < 5.0,
        f"max endpoint error {worst:.2e}, masks pixel-exact for steps 1/5/50, {elapsed:.1f}s",
    )


def test_criterion_2_gradient_fidelity():
    start = time.time()
    torch.manual_seed(0)
    backbone = BackboneConfig(widths=(8, 8, 8), time_dim=16, num_classes=3)
    fa = FAConfig(patch=2, depth=1, modulator_depth=1, heads=2, dim=16)
    model = build_model(backbone, fa, seed=1).double()
    with torch.no_grad():
        for p in model.flow.head.parameters():
            p.normal_(std=0.05, generator=torch.Generator().manual_seed(2))
    g = torch.Generator().manual_seed(3)
    x1 = torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)
    x0 = torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)
    t = torch.rand(1, generator=g, dtype=torch.float64)
    image = torch.randn(1, 1, 16, 16, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (1, 16, 16), generator=g)
    weights = LossWeights(lam=0.1, alpha=10.0)

    def compute_loss():
        state = interpolate(Endpoints(x0, x1), t)
        u_pred, bundle = model(state.x_t, state.t, image)
        return total_loss(
            velocity_loss(u_pred, target_velocity(Endpoints(x0, x1))),
            dice_loss(bundle.aux_logits, labels),
            ce_loss(bundle.aux_logits, labels),
            weights,
        )

    compute_loss().backward()
    params = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    rng = torch.Generator().manual_seed(4)
    h = 1e-4
    worst_rel = 0.0
    for _ in range(32):
        name, param = params[int(torch.randint(len(params), (1,), generator=rng))]
        idx = int(torch.randint(param.numel(), (1,), generator=rng))
        analytic = param.grad.flatten()[idx].item()
        flat = param.data.flatten()
        original = flat[idx].item()
        with torch.no_grad():
            flat[idx] = original + h
            up = compute_loss().item()
            flat[idx] = original - h
            down = compute_loss().item()
            flat[idx] = original
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        worst_rel = max(worst_rel, rel)
        assert rel < 1e-3, f"{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
    elapsed = time.time() - start
    report(
        "criterion 2 (gradient fidelity)",
        worst_rel < 1e-3 and elapsed < 120.0,
        f"32 sampled parameters, worst relative error {worst_rel:.2e}, {elapsed:.1f}s",
    )


def test_criterion_3_module_identities():
    start = time.time()
    g = torch.Generator().manual_seed(0)

    # FFT round trip.
    fft_err = 0.0
    for shape in ((1, 2, 8, 8), (2, 4, 16, 16), (1, 3, 32, 32)):
        x = torch.randn(*shape, generator=g)
        fft_err = max(fft_err, (from_frequency(to_frequency(x), assert_real=True) - x).abs().max().item())
    assert fft_err <= 1e-5

    # TD-X identities, exact.
    a = torch.randn(2, 6, 16, generator=g)
    b = torch.randn(2, 6, 16, generator=g)
    agr_ab, diff_ab, res_ab = tdx_cues(a, b)
    agr_ba, diff_ba, res_ba = tdx_cues(b, a)
    assert torch.equal(diff_ab, res_ab.abs())
    assert torch.equal(res_ab, -res_ba)
    assert torch.equal(agr_ab, agr_ba) and torch.equal(diff_ab, diff_ba)
    same_agr, same_diff, same_res = tdx_cues(a, a.clone())
    assert torch.equal(same_diff, torch.zeros_like(a))
    assert torch.equal(same_res, torch.zeros_like(a))

    # DB-SA gate range and constant-input high-pass kill.
    torch.manual_seed(1)
    dbsa = DualBranchSpatialAttention(cond_channels=8, flow_channels=8)
    gate = dbsa.gate(torch.randn(2, 8, 8, 8, generator=g), torch.randn(2, 8, 8, 8, generator=g))
    assert (gate > 0).all() and (gate < 1).all()
    const = torch.full((1, 8, 12, 12), 4.2)
    residual = (const - dbsa.gauss_high(const)).abs().max().item()
    assert residual <= 1e-6

    # Attention rows are probability vectors.
    attn = CrossAttention(dim=16, heads=4)
    _, weights = attn.attend(torch.randn(2, 5, 16, generator=g), torch.randn(2, 7, 16, generator=g))
    assert (weights >= 0).all()
    assert (weights.sum(-1) - 1).abs().max().item() <= 1e-6

    # Modulation mask in the open unit interval.
    mod = NeuralModulator(dim=16, heads=4, depth=2, time_dim=16)
    tokens = [TokenSequence(torch.randn(2, 4, 16, generator=g), (2, 2), 4) for _ in range(3)]
    mask = mod(*tokens, torch.randn(2, 16, generator=g))
    assert (mask.m0 > 0).all() and (mask.m0 < 1).all()

    elapsed = time.time() - start
    report(
        "criterion 3 (module identities)",
        elapsed < 60.0,
        f"FFT round trip {fft_err:.2e}, TD-X/gate/attention/mask identities hold, {elapsed:.1f}s",
    )


@pytest.fixture(scope="module")
def overfit_artifacts(tmp_path_factory):
    """Train the small-scale model once; criteria 4 and parts of 8 reuse it."""
    root = tmp_path_factory.mktemp("overfit")
    generate_synthetic(
        SyntheticSpec(count=64, resolution=64, num_classes=3, noise=0.05, seed=11),
        root / "train",
    )
    generate_synthetic(
        SyntheticSpec(count=16, resolution=64, num_classes=3, noise=0.05, seed=12),
        root / "held",
    )
    train = load_dataset(root / "train")
    held = load_dataset(root / "held")
    backbone = BackboneConfig(widths=(16, 32, 64), time_dim=64, num_classes=3)
    fa = FAConfig(patch=4, depth=2, modulator_depth=2, heads=4, dim=64)
    model = build_model(backbone, fa, seed=0)
    cfg = TrainConfig(lr=2e-4, batch_size=8, max_steps=3000, seed=0)
    trainer = Trainer(model, train, cfg, run_dir=root / "run")
    start = time.time()
    trainer.run()
    train_seconds = time.time() - start
    return {
        "trainer": trainer,
        "train": train,
        "held": held,
        "train_seconds": train_seconds,
        "root": root,
    }


def _ensemble_scores(model, samples, num_classes, steps=50, runs=10, seed=1):
    dices, hds = [], []
    for sample in samples:
        result = sample_ensemble(
            model, sample.image, MaskEncoding(num_classes),
            SamplerConfig(steps=steps, runs=runs, seed=seed),
        )
        rep = evaluate_pair(result.fused.numpy(), sample.labelmap.numpy(), num_classes)
        dices.append(rep.mean_dice)
        if not math.isnan(rep.mean_hd95):
            hds.append(rep.mean_hd95)
    return float(np.mean(dices)), float(np.mean(hds)) if hds else float("nan")


def test_criterion_4_small_scale_overfit(overfit_artifacts):
    start = time.time()
    trainer = overfit_artifacts["trainer"]
    model = trainer.ema_model()
    train_dice, train_hd = _ensemble_scores(model, overfit_artifacts["train"], 3)
    held_dice, _ = _ensemble_scores(model, overfit_artifacts["held"], 3)
    elapsed = overfit_artifacts["train_seconds"] + (time.time() - start)
    passed = (
        train_dice >= 0.95
        and train_hd <= 3.0
        and held_dice >= 0.90
        and elapsed <= 3 * 3600
    )
    report(
        "criterion 4 (small-scale overfit)",
        passed,
        f"train dice {train_dice:.4f} (>=0.95), train HD95 {train_hd:.2f}px (<=3), "
        f"held-out dice {held_dice:.4f} (>=0.90), total {elapsed/60:.1f}min",
    )


def test_criterion_5_staple_correctness():
    start = time.time()
    rng = np.random.default_rng(2024)
    cases = 0
    max_pq_err = 0.0
    while cases < 100:
        if cases % 2 == 0:
            masks = rng.random((3, 4, 4)) < rng.uniform(0.2, 0.8)
        else:
            base = rng.random((4, 4)) < 0.5
            masks = np.stack([base ^ (rng.random((4, 4)) < 0.15) for _ in range(3)])
        if not masks.any():
            continue
        result = staple_fuse(masks)
        fused_ref, p_ref, q_ref, _ = staple_bruteforce(masks)
        assert np.array_equal(result.fused, fused_ref), f"case {cases}: fused mask differs"
        max_pq_err = max(
            max_pq_err,
            float(np.abs(result.sensitivity - p_ref).max()),
            float(np.abs(result.specificity - q_ref).max()),
        )
        assert max_pq_err <= 1e-6
        ll = result.log_likelihoods
        assert all(b - a >= -1e-9 for a, b in zip(ll, ll[1:])), "likelihood decreased"
        cases += 1
    elapsed = time.time() - start
    report(
        "criterion 5 (STAPLE correctness)",
        elapsed < 60.0,
        f"100 cases bit-exact, max |p,q| error {max_pq_err:.2e}, "
        f"likelihood non-decreasing, {elapsed:.1f}s",
    )


def test_criterion_6_metric_correctness():
    start = time.time()
    rng = np.random.default_rng(42)
    worst = 0.0
    hd_checked = 0
    for _ in range(200):
        a = rng.random((16, 16)) < 0.3
        b = rng.random((16, 16)) < 0.3
        d, j = dice(a, b), iou(a, b)
        worst = max(worst, abs(d - dice_bruteforce(a, b)), abs(j - iou_bruteforce(a, b)))
        assert abs(d - 2 * j / (1 + j)) <= 1e-9
        expected_hd = hd95_bruteforce(a, b)
        actual_hd = hd95(a, b)
        if math.isnan(expected_hd):
            assert math.isnan(actual_hd)
        else:
            worst = max(worst, abs(actual_hd - expected_hd))
            hd_checked += 1
    elapsed = time.time() - start
    report(
        "criterion 6 (metric correctness)",
        worst <= 1e-9 and elapsed < 60.0,
        f"200 pairs ({hd_checked} with defined HD95), worst error {worst:.2e}, "
        f"Dice=2IoU/(1+IoU) everywhere, {elapsed:.1f}s",
    )


def test_criterion_7_ablation_wiring(tmp_path):
    start = time.time()
    generate_synthetic(SyntheticSpec(count=8, resolution=32, num_classes=3, seed=3), tmp_path)
    samples = load_dataset(tmp_path)

    def make(use_dbsa=True, use_fa=True, use_modulator=True):
        backbone = BackboneConfig(
            widths=(8, 8, 8), time_dim=16, num_classes=3,
            use_dbsa=use_dbsa, use_fa_attention=use_fa,
        )
        fa = FAConfig(patch=2, depth=1, modulator_depth=1, heads=2, dim=16,
                      use_modulator=use_modulator)
        return build_model(backbone, fa, seed=5)

    full = make()
    ablations = {
        "no_dbsa": (make(use_dbsa=False), parameter_count(full.flow.dbsa)),
        "no_fa": (make(use_fa=False), parameter_count(full.flow.fa)),
        "no_modulator": (
            make(use_modulator=False),
            sum(parameter_count(b.modulator) for b in full.flow.fa.blocks),
        ),
    }
    details = []
    for name, (model, expected_delta) in ablations.items():
        delta = parameter_count(full) - parameter_count(model)
        assert delta == expected_delta, f"{name}: param delta {delta} != {expected_delta}"
        details.append(f"{name} -{delta}")

    for name, model in [("full", full)] + [(n, m) for n, (m, _) in ablations.items()]:
        trainer = Trainer(
            model, samples, TrainConfig(lr=1e-3, batch_size=4, max_steps=100, seed=0)
        )
        records = trainer.run()
        first = np.mean([r["total_loss"] for r in records[:10]])
        last = np.mean([r["total_loss"] for r in records[-10:]])
        assert last < first, f"{name}: loss did not decrease ({first:.4f} -> {last:.4f})"
    elapsed = time.time() - start
    report(
        "criterion 7 (ablation wiring)",
        True,
        f"param deltas exact ({', '.join(details)}); all four variants trained "
        f"100 steps with decreasing loss, {elapsed:.0f}s",
    )


def test_criterion_8_determinism(tmp_path):
    # Synthetic datasets byte-identical under a fixed seed.
    for name in ("a", "b"):
        assert cli_main([
            "synth", "--count", "4", "--resolution", "32", "--seed", "9",
            "--out", str(tmp_path / name),
        ]) == 0
    for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")):
        if (tmp_path / "a" / rel).is_file():
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    # Loss traces bitwise identical across two runs on one device.
    samples = load_dataset(tmp_path / "a")
    traces = []
    for _ in range(2):
        backbone = BackboneConfig(widths=(8, 8, 8), time_dim=16, num_classes=3)
        fa = FAConfig(patch=2, depth=1, modulator_depth=1, heads=2, dim=16)
        model = build_model(backbone, fa, seed=13)
        trainer = Trainer(model, samples, TrainConfig(lr=1e-3, batch_size=4, max_steps=10, seed=13))
        traces.append([r["total_loss"] for r in trainer.run()])
    assert traces[0] == traces[1]

    # Prediction bytes identical under a fixed sampling seed.
    pred_dirs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        assert cli_main([
            "sample", "--images", str(tmp_path / "a"), "--oracle-masks", str(tmp_path / "a"),
            "--out", str(out), "--steps", "3", "--runs", "2", "--seed", "21",
        ]) == 0
        pred_dirs.append(out)
    png_count = 0
    for png in sorted(pred_dirs[0].glob("*.png")):
        assert png.read_bytes() == (pred_dirs[1] / png.name).read_bytes()
        png_count += 1
    assert png_count == 4
    report(
        "criterion 8 (determinism)",
        True,
        "datasets, loss traces, and prediction bytes identical under fixed seeds",
    )
