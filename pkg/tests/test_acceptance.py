"""End-to-end acceptance gate.

One test per criterion; each prints a single summary line so the suite
output doubles as the acceptance report:

    [ACCEPTANCE] <number> <name>: PASS|FAIL (<details>)

Criterion 9 needs real backbone weights and is skipped unless the
TRITEX_VGG19 environment variable points at a converted weights file; it
is recorded as an artifact and never gates the suite.
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest
import scipy.stats
import torch

from tritex import (
    ChannelLayout,
    MaterialStack,
    SynthesisConfig,
    TrainConfig,
    TripletGramCache,
    alignment_metric,
    all_triplets,
    generate,
    gradcheck,
    gram,
    gram_statistics,
    load_model,
    loss_3channel,
    loss_nchannel_exact,
    loss_nchannel_stochastic,
    loss_separate_baseline,
    sample_triplet,
    save_model,
    synthesize,
    train_generator,
    unbiasedness_check,
    write_alignment_json,
)
from tritex import seeding
from tritex.cli import main
from tritex.trace import read_trace

SAMPLE_MANIFEST = Path(__file__).resolve().parent.parent / "assets" / "sample_material" / "manifest.json"


def _report(capsys, number: int, name: str, ok: bool, details: str) -> None:
    with capsys.disabled():
        verdict = "PASS" if ok else "FAIL"
        print(f"[ACCEPTANCE] {number} {name}: {verdict} ({details})")


def _flat(data: np.ndarray) -> MaterialStack:
    return MaterialStack(data, ChannelLayout.flat(data.shape[2]))


def _exact_loss(stack: MaterialStack, exemplar: MaterialStack, extractor) -> float:
    with torch.no_grad():
        return loss_nchannel_exact(
            stack.tensor(extractor.dtype), exemplar.tensor(extractor.dtype), extractor
        ).item()


def test_criterion_1_unbiasedness(mock_extractor, capsys):
    worst = 0.0
    for n in (1, 2, 3, 4):
        rng = np.random.default_rng(100 + n)
        a = _flat(rng.random((16, 16, n)))
        b = _flat(rng.random((16, 16, n)))
        report = unbiasedness_check(a, b, mock_extractor)
        worst = max(worst, report.relative_gap)
    ok = worst < 1e-6
    _report(capsys, 1, "estimator-unbiasedness", ok, f"worst relative gap {worst:.3g} over n=1..4")
    assert ok


def test_criterion_2_sampler_support_and_uniformity(capsys):
    n, draws = 9, 270_000
    rng = np.random.default_rng(42)
    counts = np.zeros(n**3, dtype=np.int64)
    seen = set()
    for _ in range(draws):
        t = sample_triplet(n, rng)
        seen.add(t)
        counts[(t[0] * n + t[1]) * n + t[2]] += 1

    space = set(all_triplets(n))
    support_ok = seen == space and len(space) == 729
    expected = draws / 729
    statistic = float(((counts - expected) ** 2 / expected).sum())
    threshold = float(scipy.stats.chi2.ppf(0.999, 728))
    uniform_ok = statistic < threshold
    ok = support_ok and uniform_ok
    _report(
        capsys, 2, "triplet-sample-space", ok,
        f"support {len(seen)}/729, chi-square {statistic:.1f} < {threshold:.1f}",
    )
    assert ok


def test_criterion_3_gradient_correctness(mock_extractor, capsys):
    rng = np.random.default_rng(11)
    ref3 = torch.tensor(rng.random((3, 16, 16)))
    point3 = torch.tensor(rng.random((3, 16, 16)))
    refn = torch.tensor(rng.random((4, 16, 16)))
    pointn = torch.tensor(rng.random((4, 16, 16)))
    with torch.no_grad():
        ref_grams = gram_statistics(mock_extractor, ref3)

    def loss3(x):
        return loss_3channel(x, ref_grams, mock_extractor).total

    def loss_stochastic(x):
        # Same rng seed per call, so the sampled triplets are frozen.
        return loss_nchannel_stochastic(x, refn, mock_extractor, np.random.default_rng(123), k=2).total

    r3 = gradcheck(loss3, point3, num_coords=120, rng=np.random.default_rng(0))
    rn = gradcheck(loss_stochastic, pointn, num_coords=120, rng=np.random.default_rng(1))
    ok = (
        r3.max_relative_error < 1e-4
        and rn.max_relative_error < 1e-4
        and r3.coords_checked >= 100
        and rn.coords_checked >= 100
    )
    _report(
        capsys, 3, "gradient-correctness", ok,
        f"max rel err {r3.max_relative_error:.3g} (3ch) / {rn.max_relative_error:.3g} (stochastic), "
        f"{r3.coords_checked}+{rn.coords_checked} coords",
    )
    assert ok


def test_criterion_4_gram_statistics(capsys):
    rng = np.random.default_rng(4)
    worst_psd = 0.0
    worst_perm = 0.0
    worst_scale = 0.0
    symmetric = True
    for _ in range(1000):
        features = rng.standard_normal((int(rng.integers(2, 9)), int(rng.integers(4, 33))))
        f = torch.tensor(features)
        g = gram(f)
        symmetric = symmetric and torch.equal(g, g.T)
        worst_psd = max(worst_psd, float(-torch.linalg.eigvalsh(g).min()))
        perm = torch.tensor(rng.permutation(f.shape[1]))
        gap = torch.linalg.matrix_norm(gram(f[:, perm]) - g) / torch.linalg.matrix_norm(g)
        worst_perm = max(worst_perm, float(gap))
        a = float(rng.uniform(0.1, 10.0))
        scale_gap = torch.linalg.matrix_norm(gram(a * f) - a * a * g) / torch.linalg.matrix_norm(a * a * g)
        worst_scale = max(worst_scale, float(scale_gap))
    ok = symmetric and worst_psd < 1e-6 and worst_perm < 1e-12 and worst_scale < 1e-6
    _report(
        capsys, 4, "gram-properties", ok,
        f"symmetry {'exact' if symmetric else 'BROKEN'}, min eig > -{worst_psd:.3g}, "
        f"permutation gap {worst_perm:.3g}, scale gap {worst_scale:.3g}",
    )
    assert ok


def _wrap_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    fy = np.fft.fftfreq(plane.shape[0])[:, None]
    fx = np.fft.fftfreq(plane.shape[1])[None, :]
    kernel = np.exp(-2.0 * (np.pi * sigma) ** 2 * (fy**2 + fx**2))
    return np.fft.ifft2(np.fft.fft2(plane) * kernel).real


def _colocated_exemplar(size: int = 64, seed: int = 7) -> MaterialStack:
    """Two channels whose features sit at the same spots: blobs and their halo."""
    rng = np.random.default_rng(seed)
    binary = (rng.random((size, size)) < 0.18).astype(np.float64)
    ch0 = np.clip(0.15 + 0.7 * _wrap_blur(binary, 0.8), 0.0, 1.0)
    ch1 = np.clip(_wrap_blur(ch0, 1.5), 0.0, 1.0)
    return _flat(np.stack([ch0, ch1], axis=2))


def _optimize_separate(exemplar: MaterialStack, extractor, seed: int, steps: int) -> MaterialStack:
    """Baseline arm: per-channel 3-channel losses, no cross-channel term.

    Mirrors the synthesizer's initialization and Adam settings so the only
    difference between the arms is the loss.
    """
    init_seq, _ = seeding.child_sequences(seed, 2)
    ref = exemplar.tensor(extractor.dtype)
    mean = ref.mean(dim=(1, 2), keepdim=True)
    noise = torch.rand(ref.shape, generator=seeding.torch_generator(init_seq), dtype=extractor.dtype)
    init = (mean + (noise - 0.5) * 0.2).clamp(1e-3, 1.0 - 1e-3)
    param = torch.log(init / (1.0 - init)).requires_grad_(True)
    optimizer = torch.optim.Adam([param], lr=0.02)
    grouping = [(c,) for c in range(exemplar.channels)]
    cache = TripletGramCache(extractor)
    for _ in range(steps):
        optimizer.zero_grad()
        loss = loss_separate_baseline(torch.sigmoid(param), ref, extractor, grouping, cache=cache).total
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        final = torch.sigmoid(param).clamp(0.0, 1.0)
    return MaterialStack.from_tensor(final, exemplar.layout)


def test_criterion_5_correlation_preservation(mock_extractor, capsys):
    exemplar = _colocated_exemplar()
    steps = 500
    wins = 0
    gaps = []
    for seed in range(5):
        config = SynthesisConfig(64, 64, steps=steps, seed=seed, exact_eval_every=0)
        stochastic = synthesize(exemplar, config, mock_extractor).stack
        baseline = _optimize_separate(exemplar, mock_extractor, seed, steps)
        err_st = alignment_metric(exemplar, stochastic).alignment_error
        err_bl = alignment_metric(exemplar, baseline).alignment_error
        wins += err_st <= err_bl
        gaps.append((err_st, err_bl))
    ok = wins >= 4
    summary = ", ".join(f"{st:.2f}|{bl:.2f}" for st, bl in gaps)
    _report(capsys, 5, "correlation-preservation", ok, f"{wins}/5 seed wins, errors st|baseline: {summary}")
    assert ok


def test_criterion_6_optimization_smoke(mock_extractor, capsys):
    rng = np.random.default_rng(6)
    exemplar = _flat(rng.random((32, 32, 2)))
    start = synthesize(exemplar, SynthesisConfig(32, 32, steps=0, seed=0), mock_extractor)
    config = SynthesisConfig(32, 32, steps=200, seed=0, exact_eval_every=0)
    result = synthesize(exemplar, config, mock_extractor)
    before = _exact_loss(start.stack, exemplar, mock_extractor)
    after = _exact_loss(result.stack, exemplar, mock_extractor)
    ratio = before / after
    ok = ratio >= 10.0
    _report(capsys, 6, "optimization-smoke", ok, f"exact loss {before:.4g} -> {after:.4g}, {ratio:.1f}x")
    assert ok


def test_criterion_7_generator_contracts(mock_extractor, tmp_path, capsys):
    rng = np.random.default_rng(7)
    exemplar = _flat(rng.random((160, 160, 2)))
    config = TrainConfig(steps=3, batch_size=1, crop_size=128, seed=0)
    model = train_generator(exemplar, config, mock_extractor).model

    big = generate(model, 384, 384, seed=0)
    shape_ok = big.data.shape == (384, 384, 2)
    other = generate(model, 384, 384, seed=1)
    variation_ok = np.abs(big.data - other.data).mean() > 0

    path = tmp_path / "model.npz"
    save_model(model, path)
    loaded = load_model(path, mock_extractor)
    roundtrip_ok = np.array_equal(
        generate(model, 64, 64, seed=5).data, generate(loaded, 64, 64, seed=5).data
    )
    ok = shape_ok and variation_ok and roundtrip_ok
    _report(
        capsys, 7, "generator-contracts", ok,
        f"384x384 shape {'ok' if shape_ok else 'BAD'}, seeds differ {'ok' if variation_ok else 'BAD'}, "
        f"save/load bitwise {'ok' if roundtrip_ok else 'BAD'}",
    )
    assert ok


def test_criterion_8_cli_determinism(tmp_path, capsys):
    rng = np.random.default_rng(8)
    stack = _flat(rng.random((16, 16, 2)))
    from tritex import MaterialManifest, save_material

    exemplar_dir = tmp_path / "exemplar"
    manifest = MaterialManifest.for_layout(stack.layout, exemplar_dir)
    save_material(stack, manifest)
    manifest.save(exemplar_dir / "manifest.json")

    traces = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        rc = main(
            [
                "synthesize",
                "--exemplar", str(exemplar_dir / "manifest.json"),
                "--out", str(out),
                "--steps", "10",
                "--seed", "3",
            ]
        )
        assert rc == 0
        traces.append(read_trace(out / "trace.csv"))
    triplets_ok = [r.triplets for r in traces[0]] == [r.triplets for r in traces[1]]
    losses = np.array([[r.loss for r in t] for t in traces])
    loss_gap = float(np.max(np.abs(losses[0] - losses[1]) / np.maximum(np.abs(losses[0]), 1e-12)))
    losses_ok = loss_gap <= 1e-5

    train_out = tmp_path / "train"
    rc = main(
        [
            "train",
            "--exemplar", str(exemplar_dir / "manifest.json"),
            "--out", str(train_out),
            "--steps", "2",
            "--batch", "1",
            "--scales", "2",
            "--width-step", "4",
            "--crop", "16",
        ]
    )
    assert rc == 0
    images = []
    for name in ("g1", "g2"):
        out = tmp_path / name
        rc = main(
            [
                "generate",
                "--model", str(train_out / "model.npz"),
                "--out", str(out),
                "--size", "32",
                "--seed", "9",
            ]
        )
        assert rc == 0
        images.append((out / "ch0.png").read_bytes() + (out / "ch1.png").read_bytes())
    generate_ok = images[0] == images[1]

    ok = triplets_ok and losses_ok and generate_ok
    _report(
        capsys, 8, "cli-determinism", ok,
        f"triplet sequences {'match' if triplets_ok else 'DIFFER'}, "
        f"max loss gap {loss_gap:.3g}, generated bytes {'match' if generate_ok else 'DIFFER'}",
    )
    assert ok


def test_criterion_9_full_scale_qualitative(tmp_path, capsys):
    weights = os.environ.get("TRITEX_VGG19")
    if not weights:
        with capsys.disabled():
            print(
                "[ACCEPTANCE] 9 full-scale-qualitative: SKIP "
                "(set TRITEX_VGG19 to a converted weights file to run)"
            )
        pytest.skip("TRITEX_VGG19 not set")

    from tritex import ExtractorConfig, load_extractor, load_material, MaterialManifest

    extractor = load_extractor(ExtractorConfig.vgg19(weights))
    exemplar = load_material(MaterialManifest.load(SAMPLE_MANIFEST))
    config = SynthesisConfig(256, 256, steps=200, seed=0, exact_eval_every=0)
    result = synthesize(exemplar, config, extractor)
    finite = all(np.isfinite(r.loss) for r in result.trace)

    baseline = _optimize_separate(exemplar, extractor, seed=0, steps=200)
    report_st = alignment_metric(exemplar, result.stack)
    report_bl = alignment_metric(exemplar, baseline)

    artifact_dir = Path(__file__).resolve().parent.parent / "artifacts" / "full_scale"
    artifact_dir.mkdir(parents=True, exist_ok=True)
    write_alignment_json(report_st, artifact_dir / "alignment_stochastic.json")
    write_alignment_json(report_bl, artifact_dir / "alignment_baseline.json")
    (artifact_dir / "summary.json").write_text(
        json.dumps(
            {
                "completed_without_divergence": finite,
                "alignment_error_stochastic": report_st.alignment_error,
                "alignment_error_baseline": report_bl.alignment_error,
                "final_training_loss": result.trace[-1].loss,
            },
            indent=2,
        )
        + "\n"
    )
    # Recorded as an artifact; only completion gates the test.
    _report(
        capsys, 9, "full-scale-qualitative", finite,
        f"alignment error stochastic {report_st.alignment_error:.3f} vs baseline "
        f"{report_bl.alignment_error:.3f}, artifacts in {artifact_dir}",
    )
    assert finite
