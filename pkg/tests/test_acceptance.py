"""Acceptance gate: one test per shipping criterion, each printing a
PASS line with its measured runtime against the stated budget.

One test fails by design: test_criterion_1_reference_table_display
documents the five reference-table cells that no schedule consistent
with the frozen encoder totals can reproduce at displayed precision.
It prints the per-cell computed-versus-displayed report instead of
hiding the discrepancy (analyze-cost --report shows the same view).
"""

import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from voxpcc import codec, costmodel, entropy, geometry, nn
from voxpcc.cli import load_config, main as cli_main
from voxpcc.metrics import PointCloud, bd_rate, d1_psnr, d2_psnr
from voxpcc.models import ModelConfig, build_network
from voxpcc.rangecoder import RangeDecoder, RangeEncoder

ROOT = Path(__file__).resolve().parents[1]

DESK = dict(variant="baseline", activation="cgdn", block_size=16,
            channels=(8, 12, 16), latent_channels=32,
            hyper_channels=(16, 8))


def _ok(name: str, t0: float, budget: float):
    dt = time.monotonic() - t0
    assert dt < budget, f"{name} took {dt:.1f}s, budget {budget:g}s"
    print(f"[acceptance] {name}: PASS ({dt:.1f}s, budget {budget:g}s)")


@pytest.fixture(scope="module")
def desk_corpus():
    rng = np.random.default_rng(0)
    kinds = ("sphere", "torus", "plane", "sphere", "torus", "plane")
    clouds = [geometry.synthetic_cloud(k, 32, rng) for k in kinds]
    return codec.blocks_from_clouds(clouds, 16), clouds[:3]


# ---------------------------------------------------------------------------
# 1. analytic cost model

def test_criterion_1_cost_model_exactness(capsys):
    t0 = time.monotonic()
    base = costmodel.model_cost("baseline")
    prop = costmodel.model_cost("proposed")
    assert (base.params, base.macs) == (806_888, 1_117_677_312)
    assert (prop.params, prop.macs) == (639_192, 1_029_564_160)
    assert round((1 - prop.params / base.params) * 100, 2) == 20.78
    assert costmodel.display_match(base.macs, "1.118B")

    # external-codec preset: displayed-precision match, or the
    # discrepancy is flagged in the report rather than hidden
    ext = costmodel.model_cost("learned_pcgc")
    ref = costmodel.REFERENCE_DISPLAY["learned_pcgc"]
    matches = (costmodel.display_match(ext.params, ref["params"])
               and costmodel.display_match(ext.macs, ref["macs"]))
    assert cli_main(["analyze-cost", "--report"]) == 0
    out = capsys.readouterr().out
    if not matches:
        rows = [line for line in out.splitlines() if "learned_pcgc" in line]
        assert rows and any("FLAG" in line for line in rows)
    _ok("criterion 1 (cost-model exactness)", t0, 1.0)


def test_criterion_1_reference_table_display():
    """Displayed-precision check for every reference-table cell.

    Known open discrepancy, kept failing on purpose: the frozen
    configuration reproduces the prose encoder totals exactly, and five
    of these six display cells are unreachable from any schedule that
    does (see the notes next to REFERENCE_DISPLAY and the resolver in
    tools/).
    """
    rows, bad = [], []
    for name in ("baseline", "proposed", "proposed2"):
        rep = costmodel.model_cost(name)
        ref = costmodel.REFERENCE_DISPLAY[name]
        for field, value in (("params", rep.params), ("macs", rep.macs)):
            shown = costmodel.format_like(value, ref[field])
            cell_ok = costmodel.display_match(value, ref[field])
            rows.append(f"{name:<10} {field:<6} computed {value:>13,}"
                        f" -> {shown:>7} vs {ref[field]:>7} "
                        f"{'ok' if cell_ok else 'MISMATCH'}")
            if not cell_ok:
                bad.append(f"{name}.{field}")
    print("[acceptance] criterion 1 (reference table display):")
    for row in rows:
        print("   ", row)
    assert not bad, f"cells off at displayed precision: {bad}"


# ---------------------------------------------------------------------------
# 2. exact formula identities

def test_criterion_2_formula_identities():
    t0 = time.monotonic()
    for c in (8, 16, 48, 64):
        sep = costmodel.separable_cost(c, c // 2, 1, bias=False)
        full = costmodel.conv3d_cost(3, c, c // 2, 1, bias=False)
        assert Fraction(sep.macs, full.macs) == Fraction(5, 18)
    assert costmodel.utilization_fraction(8, 3, 3) == Fraction(27, 64)
    assert costmodel.utilization_fraction(16, 3, 3) == Fraction(343, 512)
    assert costmodel.masked_fraction("corner", 3, 2) == Fraction(5, 9)
    assert costmodel.masked_fraction("corner", 3, 3) == Fraction(19, 27)
    _ok("criterion 2 (formula identities)", t0, 1.0)


# ---------------------------------------------------------------------------
# 3. gradients

def _scalar_probe(op):
    """Wrap a tensor-valued op as a scalar one via a fixed random
    weighting so the check exercises the whole Jacobian."""
    weights = {}

    def scalar_op(*inputs):
        out = op(*inputs)
        if out.data.shape not in weights:
            weights[out.data.shape] = (np.random.default_rng(99)
                                       .standard_normal(out.data.shape))
        r = weights[out.data.shape]

        def bwd(g):
            nn.accumulate(out, g * r)

        return nn.node(np.array((out.data * r).sum()), (out,), bwd)

    return scalar_op


def test_criterion_3_gradient_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    report = []

    def check(name, op, inputs, eps=1e-4, coords=6):
        err = nn.finite_difference_check(_scalar_probe(op), inputs,
                                         epsilon=eps, max_coords=coords,
                                         rng=np.random.default_rng(11))
        report.append(f"{name}: {err:.2e}")
        assert err < 1e-4, f"{name}: max rel err {err:.3e}"

    x = nn.Tensor(rng.standard_normal((3, 6, 6, 6)))
    w = nn.Tensor(0.3 * rng.standard_normal((4, 3, 3, 3, 3)))
    b = nn.Tensor(0.1 * rng.standard_normal(4))
    check("conv3d/s1", lambda x, w, b: nn.conv3d(x, w, b, 1), [x, w, b])
    check("conv3d/s2", lambda x, w, b: nn.conv3d(x, w, b, 2), [x, w, b])
    wt = nn.Tensor(0.3 * rng.standard_normal((3, 4, 3, 3, 3)))
    b4 = nn.Tensor(0.1 * rng.standard_normal(4))
    check("conv3d_transposed/s2",
          lambda x, w, b: nn.conv3d_transposed(x, w, b, 2, (11, 12, 12)),
          [x, wt, b4])
    wa = nn.Tensor(0.3 * rng.standard_normal((4, 3, 3)))
    check("conv1d_axis/y", lambda x, w, b: nn.conv1d_axis(x, "y", w, b),
          [x, wa, b4])
    wp = nn.Tensor(0.3 * rng.standard_normal((4, 3, 3, 3)))
    check("conv2d_plane/z", lambda x, w, b: nn.conv2d_plane(x, "z", w, b),
          [x, wp, b4])

    # relu checked away from its kink
    v = rng.standard_normal((3, 5, 5, 5))
    xr = nn.Tensor(np.where(np.abs(v) < 0.05, 0.3, v))
    check("relu", nn.relu, [xr])

    for flavor in ("gdn", "cgdn"):
        params = nn.GdnParams.create(3, flavor, f"t.{flavor}")
        params.gamma.data[...] = rng.uniform(0.05, 0.3,
                                             params.gamma.data.shape)
        params.beta.data[...] = rng.uniform(0.6, 1.4,
                                            params.beta.data.shape)
        xg = nn.Tensor(rng.standard_normal((3, 4, 4, 4)))
        check(flavor, lambda *_: getattr(nn, flavor)(xg, params),
              [xg, params.beta, params.gamma])

    target = (rng.uniform(size=(1, 5, 5, 5)) < 0.2).astype(float)
    xh = nn.Tensor(rng.uniform(0.05, 0.95, (1, 5, 5, 5)))
    check("focal", lambda p: nn.focal_loss(target, p), [xh], eps=1e-5)

    yl = nn.Tensor(rng.uniform(-2.0, 2.0, (2, 4, 3)))
    sig = nn.Tensor(rng.uniform(0.5, 2.0, (2, 4, 3)))
    check("gaussian-likelihood",
          lambda y, s: entropy.likelihood_gaussian(y, s), [yl, sig],
          eps=1e-5)

    prior = entropy.FactorizedPrior(2, np.random.default_rng(8))
    zl = nn.Tensor(rng.uniform(-1.5, 1.5, (2, 2, 2, 2)))
    check("factorized-likelihood",
          lambda *_: entropy.likelihood_factorized(zl, prior),
          [zl] + prior.parameters(), eps=1e-5)

    _pipeline_check(report)
    print("[acceptance] gradient checks:", "; ".join(report))
    _ok("criterion 3 (gradient suite)", t0, 300.0)


def _pipeline_check(report):
    """Central-difference check of the composed transform: analysis,
    additive-noise quantization (noise drawn once and frozen so the op
    is deterministic), hyper path, rate, synthesis, focal distortion."""
    cfg = ModelConfig(**{**DESK, "synthesis_gdn": True})
    net = build_network(cfg, seed=3)
    rng = np.random.default_rng(0)
    # interior parameter point: the hyper transforms end in hard relus
    # whose pre-activations sit exactly at the kink under raw
    # initialization, so biases get seeded offsets
    for p in net.parameters():
        if p.name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.05, 0.3, p.data.shape)
        elif p.name.endswith(".beta"):
            p.data[...] = rng.uniform(0.6, 1.4, p.data.shape)
        elif p.name.endswith(".bias"):
            p.data[...] = rng.uniform(0.1, 0.3, p.data.shape)
    cloud = geometry.synthetic_cloud("sphere", 32, rng)
    occ = codec.blocks_from_clouds([cloud], 16)[1]
    x = occ[None].astype(np.float64)
    ny = nn.Tensor(rng.uniform(-0.4, 0.4, (32,) + codec.latent_dims(16)))
    nz = nn.Tensor(rng.uniform(-0.4, 0.4, (8,) + codec.side_dims(16)))

    def op(*_):
        y = net.analysis(nn.Tensor(x))
        z = net.hyper_analysis(y)
        z_hat = z + nz
        sigma = net.hyper_synthesis(z_hat, y.data.shape[1:])
        y_hat = y + ny
        rate = entropy.rate_bits([
            entropy.likelihood_gaussian(y_hat, sigma),
            entropy.likelihood_factorized(z_hat, net.prior)])
        x_hat = net.synthesis(y_hat)
        return rate + 10.0 * 16 ** 3 * nn.focal_loss(x, x_hat)

    # the chosen point must actually be away from the z-head kink
    z = net.hyper_analysis(net.analysis(nn.Tensor(x))).data
    assert np.abs(z).min() > 1e-3
    err = nn.finite_difference_check(op, net.parameters(), epsilon=3e-5,
                                     max_coords=3,
                                     rng=np.random.default_rng(5))
    report.append(f"pipeline-16^3: {err:.2e}")
    assert err < 1e-4, f"composed pipeline: max rel err {err:.3e}"


# ---------------------------------------------------------------------------
# 4. codec correctness

def test_criterion_4_codec_correctness():
    t0 = time.monotonic()

    # range coder: 10^4 fuzz cases round-trip exactly
    rng = np.random.default_rng(12)
    for _ in range(10_000):
        n_sym = int(rng.integers(2, 17))
        freqs = rng.integers(1, 60, n_sym).astype(np.int64)
        freqs[int(rng.integers(n_sym))] += int(rng.integers(1, 2000))
        cums = np.concatenate([[0], np.cumsum(freqs)])
        total = int(cums[-1])
        symbols = rng.integers(0, n_sym, size=int(rng.integers(1, 13)))
        enc = RangeEncoder()
        for s in symbols:
            enc.encode(int(cums[s]), int(freqs[s]), total)
        dec = RangeDecoder(enc.finish())
        for s in symbols:
            f = dec.decode_freq(total)
            got = int(np.searchsorted(cums, f, side="right")) - 1
            assert got == s
            dec.decode_update(int(cums[got]), int(freqs[got]), total)

    # container round trip: exact per-block counts, lossless octree
    network = build_network(ModelConfig(**DESK), seed=11)
    cloud = geometry.synthetic_cloud("torus", 32, np.random.default_rng(13))
    data = codec.encode_point_cloud(cloud, network)
    octree = geometry.partition_octree(cloud, 16)
    header, _ = codec.parse_header(data)
    assert header.masks == octree.masks
    decoded = codec.decode_point_cloud(data, network)
    got = geometry.partition_octree(decoded, 16)
    assert got.masks == octree.masks
    assert ([b.point_count() for b in got.blocks]
            == [b.point_count() for b in octree.blocks])

    # coded length within 1% + 32 bytes of the entropy estimate per block
    tables = entropy.build_cdf_tables(network.prior)
    for block in octree.blocks:
        occ = block.occupancy
        y = network.analysis(nn.Tensor(occ[None].astype(float))).data
        z = network.hyper_analysis(nn.Tensor(y)).data
        z_hat = entropy.quantize(z, "test")
        sigma = network.hyper_synthesis(nn.Tensor(z_hat), y.shape[1:]).data
        y_hat = entropy.quantize(y, "test")
        z_syms = z_hat.reshape(z_hat.shape[0], -1).astype(np.int64)
        bins = entropy.sigma_bin_indices(sigma.reshape(-1),
                                         tables.sigma_centers)
        est_bits = entropy.table_bits(
            z_syms.reshape(-1),
            codec._z_tables(network, tables, z_syms.shape[1]))
        est_bits += entropy.table_bits(
            y_hat.reshape(-1).astype(np.int64),
            [tables.gaussian[i] for i in bins])
        record = codec._encode_block(network, tables, occ)
        assert len(record) <= est_bits / 8 * 1.01 + 32

    _ok("criterion 4 (codec correctness)", t0, 120.0)


# ---------------------------------------------------------------------------
# 5. desk-scale training behavior

def _bench_rd(network, bench, lam):
    total_bytes = total_points = 0
    d1s = []
    for cloud in bench:
        data = codec.encode_point_cloud(cloud, network, lam=lam)
        point = codec.evaluate_rd(cloud, data, network)
        total_bytes += len(data)
        total_points += len(cloud)
        d1s.append(point.d1_psnr)
    return 8.0 * total_bytes / total_points, float(np.mean(d1s))


def test_criterion_5_training_behavior(desk_corpus, tmp_path):
    t0 = time.monotonic()
    blocks, bench = desk_corpus
    cfg = ModelConfig(**DESK)

    # 200-step smoke run: loss decreases
    smoke = codec.TrainSchedule(lambdas=(10.0,), max_steps=200,
                                batch_size=8, val_every=1000,
                                val_batches=1, patience=99, seed=0,
                                lr_main=1e-3, lr_prior=1e-3)
    _, res = codec.train(blocks, cfg, smoke)
    losses = res[0].step_losses
    first, last = np.mean(losses[:20]), np.mean(losses[-20:])
    print(f"[acceptance] smoke: first20 {first:.1f} -> last20 {last:.1f}")
    assert first > last

    # warm-started sweep: nondecreasing bits-per-point and D1 with lambda
    sweep = codec.TrainSchedule(lambdas=(10.0, 20.0, 40.0, 80.0),
                                max_steps=1000, batch_size=8,
                                val_every=250, val_batches=4, patience=99,
                                seed=0, lr_main=1e-3, lr_prior=1e-3)
    _, results = codec.train(blocks, cfg, sweep, checkpoint_dir=tmp_path)
    curve = []
    for r in results:
        net, _, _ = codec.load_checkpoint(r.checkpoint)
        curve.append((r.lam,) + _bench_rd(net, bench, r.lam))
    for lam, bpp, d1 in curve:
        print(f"[acceptance] sweep lam={lam:g} bpp={bpp:.4f} d1={d1:.3f}")
    bpps = [c[1] for c in curve]
    d1s = [c[2] for c in curve]
    assert all(b2 >= b1 for b1, b2 in zip(bpps, bpps[1:])), bpps
    assert all(q2 >= q1 for q1, q2 in zip(d1s, d1s[1:])), d1s

    # activation comparison at equal lambda: the sweep's first stage is
    # a from-scratch lambda=10 run, matched here by an identical
    # schedule with relu activations
    relu_cfg = ModelConfig(**{**DESK, "activation": "relu"})
    single = codec.TrainSchedule(lambdas=(10.0,), max_steps=1000,
                                 batch_size=8, val_every=250,
                                 val_batches=4, patience=99, seed=0,
                                 lr_main=1e-3, lr_prior=1e-3)
    relu_net, _ = codec.train(blocks, relu_cfg, single)
    _, d1_relu = _bench_rd(relu_net, bench, 10.0)
    d1_cgdn = d1s[0]
    print(f"[acceptance] equal-lambda d1: cgdn {d1_cgdn:.3f} vs "
          f"relu {d1_relu:.3f}")
    assert d1_cgdn >= d1_relu

    _ok("criterion 5 (training behavior)", t0, 1800.0)


# ---------------------------------------------------------------------------
# 6. metrics

def _brute_nn(queries, references):
    q = np.asarray(queries, float)
    r = np.asarray(references, float)
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    return idx, d2[np.arange(len(q)), idx]


def test_criterion_6_metric_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(21)

    a = PointCloud(np.unique(rng.integers(0, 48, (220, 3)), axis=0), 48)
    b = PointCloud(np.unique(rng.integers(0, 48, (180, 3)), axis=0), 48)
    idx_ab, d_ab = _brute_nn(a.points, b.points)
    idx_ba, d_ba = _brute_nn(b.points, a.points)
    mse = max(d_ab.mean(), d_ba.mean())
    assert d1_psnr(a, b) == pytest.approx(
        10 * math.log10(3 * 47 ** 2 / mse), abs=1e-9)

    normals = rng.standard_normal((len(a), 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    ap, bp = a.points.astype(float), b.points.astype(float)
    err_ab = (((bp[idx_ab] - ap) * normals).sum(axis=1) ** 2).mean()
    err_ba = (((bp - ap[idx_ba]) * normals[idx_ba]).sum(axis=1) ** 2).mean()
    assert d2_psnr(a, b, normals) == pytest.approx(
        10 * math.log10(3 * 47 ** 2 / max(err_ab, err_ba)), abs=1e-9)

    # documented single-point convention
    one = d1_psnr(PointCloud(np.array([[0, 0, 0]]), 1024),
                  PointCloud(np.array([[1, 0, 0]]), 1024))
    assert one == pytest.approx(10 * math.log10(3 * 1023 ** 2), abs=1e-12)
    assert round(one, 2) == 64.97

    pairs = [(0.4, 60.0), (0.7, 63.0), (1.1, 66.0), (1.6, 68.0)]
    assert bd_rate(pairs, pairs) == pytest.approx(0.0, abs=1e-6)
    doubled = [(2 * r, q) for r, q in pairs]
    assert bd_rate(pairs, doubled) == pytest.approx(100.0, abs=1e-6)

    # dense numerical-integration oracle on analytic log-linear curves
    rates = np.array([0.4, 0.7, 1.1, 1.7, 2.4])
    ref = list(zip(rates, 60.0 + 12.0 * np.log10(rates)))
    test = list(zip(rates, 58.5 + 12.0 * np.log10(rates)))
    lo = max(min(q for _, q in ref), min(q for _, q in test))
    hi = min(max(q for _, q in ref), max(q for _, q in test))
    qs = np.linspace(lo, hi, 20001)
    delta = np.trapezoid((qs - 58.5) / 12.0 - (qs - 60.0) / 12.0,
                         qs) / (hi - lo)
    assert bd_rate(ref, test) == pytest.approx((10 ** delta - 1) * 100,
                                               rel=1e-4)
    _ok("criterion 6 (metric oracles)", t0, 60.0)


# ---------------------------------------------------------------------------
# 7. scale boundary

def test_criterion_7_scale_boundary_documented():
    """Full-scale result figures need corpus-scale training and external
    anchors; criteria 1-6 are the desk-scale substitute and the runbook
    documents the full-scale procedure."""
    t0 = time.monotonic()
    readme = (ROOT / "README.md").read_text()
    assert "## Full-scale runbook" in readme
    for needle in ("--mesh-dir", "configs/full64.cfg", "voxpcc bd",
                   "evaluate"):
        assert needle in readme, f"runbook is missing {needle!r}"

    # the preset the runbook points at is exactly the frozen,
    # exactly-accounted schedule
    cfg = load_config(ROOT / "configs" / "full64.cfg")
    full = ModelConfig.from_mapping(cfg)
    assert full.block_size == 64
    rep = costmodel.model_cost(full)
    assert (rep.params, rep.macs) == (806_888, 1_117_677_312)

    # and the desk substitute exists and parses
    desk = ModelConfig.from_mapping(load_config(ROOT / "configs"
                                                / "desk16.cfg"))
    assert desk.block_size == 16
    _ok("criterion 7 (scale boundary documented)", t0, 10.0)
