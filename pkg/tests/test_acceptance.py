"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``RESULTS`` and echoed in the terminal summary by
``conftest.py`` so they appear even when pytest captures output.
"""

import contextlib
import math
import time

import numpy as np
import pytest

from aquafeat import tensor as T
from aquafeat.color import apply_white_balance
from aquafeat.dataset import Annotation, read_ppm, write_ppm
from aquafeat.detector import GridPrediction, decode_predictions, detection_loss, head_forward, init_head_params
from aquafeat.metrics import (
    IOU_THRESHOLDS,
    BoundingBox,
    Detection,
    average_precision,
    fps_bench,
    map_range,
    match_detections,
    parse_report,
    evaluate_detections,
)
from aquafeat.net import (
    NetConfig,
    enhance,
    enhance_tensor,
    enhance_trace,
    init_params,
    param_shapes,
    safa_fuse,
    special_conv,
    ufen_forward,
)
from aquafeat.synthetic import make_fixture
from aquafeat.tensor import Graph, Tensor
from aquafeat.train import OptimizerState, TrainConfig, load_checkpoint, model_shapes, save_checkpoint, train

from gradcheck import check_gradients
from test_metrics import envelope_ap_oracle, greedy_consistent_flags, random_instance
from test_net import SMALL, random_params

RESULTS: dict[int, str] = {}

# Fixture for the training criteria: four very dark 64x64 scenes with 1-3
# fish each. At this light level raw pixel values sit around 0.02, the regime
# where a learned enhancement has something to offer the detector.
FIXTURE_SEED = 100
FIXTURE_KWARGS = dict(brightness=0.05, noise=0.01)
TRAIN_STEPS = 500
SEEDS = (0, 1, 2)


@contextlib.contextmanager
def criterion(number: int, title: str):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        RESULTS[number] = f"criterion {number} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        print(RESULTS[number])
        raise
    RESULTS[number] = f"criterion {number} PASS  {title} ({time.perf_counter() - start:.1f}s)"
    print(RESULTS[number])


def projection_loss(y: Tensor, seed: int) -> Tensor:
    """Scalar with a generic gradient: <y, R> for a fixed random R."""
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return T.sum_all(T.mul(y, r))


def f64_param(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# ---------------------------------------------------------------- criterion 1


def layer_cases():
    """(name, loss_fn, params) for every differentiable layer type."""
    rng = np.random.default_rng(0)
    cases = []

    for stride in (1, 2):
        p = {"x": f64_param(rng, (2, 3, 7, 7)), "w": f64_param(rng, (4, 3, 3, 3), 0.5), "b": f64_param(rng, (4,))}
        cases.append((f"conv2d stride {stride}",
                      lambda p=p, s=stride: projection_loss(T.conv2d(p["x"], p["w"], p["b"], s, 1), 1), p))

    p = {"x": f64_param(rng, (2, 3, 5, 5))}
    cases.append(("leaky_relu", lambda p=p: projection_loss(T.leaky_relu(p["x"], 0.01), 2), p))
    p = {"x": f64_param(rng, (2, 3, 5, 5))}
    cases.append(("tanh", lambda p=p: projection_loss(T.tanh_act(p["x"]), 3), p))
    p = {"x": f64_param(rng, (2, 4, 3, 3), 2.0)}
    cases.append(("softmax", lambda p=p: projection_loss(T.softmax_axis(p["x"], 1), 4), p))
    p = {"x": f64_param(rng, (1, 2, 6, 9))}
    cases.append(("bilinear_resize down", lambda p=p: projection_loss(T.bilinear_resize(p["x"], 3, 4), 5), p))
    cases.append(("bilinear_resize up", lambda p=p: projection_loss(T.bilinear_resize(p["x"], 11, 13), 6), p))
    p = {"x": f64_param(rng, (2, 3, 4, 5))}

    def stats_loss(p=p):
        mu, sd = T.channel_stats(p["x"], eps=1e-5)
        return T.add(projection_loss(mu, 7), projection_loss(sd, 8))
    cases.append(("channel_stats", stats_loss, p))

    p = {"x": Tensor(rng.random((2, 3, 6, 6)), requires_grad=True),
         "s.weight": f64_param(rng, (4, 3, 3, 3), 0.5), "s.bias": f64_param(rng, (4,), 0.1),
         "s.stat_weight": f64_param(rng, (4, 6, 1, 1), 0.5), "s.stat_bias": f64_param(rng, (4,), 0.1)}
    cases.append(("special_conv", lambda p=p: projection_loss(special_conv(p["x"], p, "s"), 9), p))

    cfg = SMALL
    safa = {k: v for k, v in random_params(cfg, 1).items() if k.startswith("safa.")}
    safa["full"] = Tensor(rng.standard_normal((1, cfg.cf_channels, 16, 16)), requires_grad=True)
    safa["quarter"] = Tensor(rng.standard_normal((1, cfg.cf_channels, 4, 4)), requires_grad=True)
    cases.append(("SAFA", lambda p=safa: projection_loss(safa_fuse(p["full"], p["quarter"], p, cfg), 10), safa))

    gts = [[Annotation(0, 0.3, 0.3, 0.2, 0.3)], [Annotation(0, 0.7, 0.6, 0.4, 0.2), Annotation(0, 0.1, 0.9, 0.1, 0.1)]]
    p = {"obj": f64_param(rng, (2, 1, 4, 4), 2.0), "box": f64_param(rng, (2, 4, 4, 4), 0.4)}
    cases.append(("detection_loss", lambda p=p: detection_loss(GridPrediction(p["obj"], p["box"]), gts), p))
    return cases


def test_criterion_1_gradient_soundness():
    with criterion(1, "gradient soundness"), T.precision(np.float64):
        start = time.perf_counter()
        worst = {}
        for name, fn, params in layer_cases():
            worst[name] = max(check_gradients(fn, params, coords=30, max_halvings=12).values())

        cfg = NetConfig()
        params = random_params(cfg, 0)
        params.update(init_head_params(cfg, np.random.default_rng(1), np.float64))
        img = np.random.default_rng(2).uniform(0.2, 0.8, (1, 3, 16, 16))
        gts = [[Annotation(0, 0.4, 0.4, 0.3, 0.2), Annotation(0, 0.75, 0.7, 0.2, 0.25)]]

        def full():
            return detection_loss(head_forward(enhance_tensor(img, params, cfg), params, cfg), gts)
        worst["enhance+head+loss"] = max(check_gradients(full, params, coords=8, max_halvings=12).values())
        elapsed = time.perf_counter() - start
        for name, err in worst.items():
            print(f"  {name:<24} max rel err {err:.2e}")
        bad = {k: v for k, v in worst.items() if not v < 1e-4}
        assert not bad, f"gradient mismatch: {bad}"
        assert elapsed < 120, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_identity_contracts():
    with criterion(2, "identity contracts"):
        cfg = NetConfig()
        rng = np.random.default_rng(0)
        params = init_params(cfg, rng)
        for size in ((8, 8), (64, 64), (70, 70), (31, 47)):
            img = rng.random(size + (3,)).astype(np.float32)
            assert np.array_equal(enhance(img, params, cfg), img), f"zero output stage changed a {size} image"

        for _ in range(50):
            gray = np.repeat(rng.random((9, 11, 1)), 3, axis=2)
            assert np.array_equal(apply_white_balance(gray), gray)

        worst = 0.0
        with T.precision(np.float64):
            for trial in range(1000):
                p = random_params(SMALL, 1000 + trial, scale=float(rng.uniform(0.5, 30.0)))
                img = rng.random((1, 3, 8, 8))
                tr = enhance_trace(img, p, SMALL)
                worst = max(worst, float(np.max(np.abs(tr.residual.data))))
        print(f"  max pre-clamp deviation over 1000 trials: {worst:.6f}")
        assert worst <= 1.0


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_architecture_invariants():
    with criterion(3, "architecture invariants"):
        cfg = NetConfig()
        rng = np.random.default_rng(0)
        weights = []
        feats = [Tensor(rng.standard_normal((2, cfg.cf_channels, s, s)).astype(np.float32)) for s in (32, 8)]
        params = random_params(cfg, 3, scale=5.0)
        with T.precision(np.float64):
            safa_fuse(*feats, params, cfg, weights_out=weights)
        assert len(weights) == cfg.safa_heads
        dev = max(float(np.max(np.abs(w.data.sum(axis=1) - 1.0))) for w in weights)
        print(f"  SAFA weight-sum deviation {dev:.2e}")
        assert dev <= 1e-6

        ufen_names = [k for k in param_shapes(cfg) if k.startswith("ufen.")]
        assert len(ufen_names) == len(set(ufen_names)) and ufen_names
        assert not any(k.startswith("ufen") and k.split(".")[1] in ("full", "quarter", "eighth") for k in param_shapes(cfg))
        base = init_params(cfg, np.random.default_rng(1))
        tr = enhance_trace(rng.random((1, 3, 16, 16)).astype(np.float32), base, cfg)
        for stream, pyr in enumerate((tr.pyramid.full, tr.pyramid.quarter, tr.pyramid.eighth)):
            assert np.array_equal(ufen_forward(pyr, base, cfg).data, tr.features[stream].data)

        with T.precision(np.float64):
            p = random_params(SMALL, 4)
            ufen = {k: v for k, v in p.items() if k.startswith("ufen.")}
            img = rng.random((1, 3, 16, 16))
            for stream in range(3):
                with Graph() as g:
                    loss = projection_loss(enhance_trace(img, p, SMALL).features[stream], stream)
                grads = T.backward(g, loss, ufen)
                assert all(np.any(grads[k] != 0) for k in ufen), f"stream {stream} gives no gradient"

        head = init_head_params(cfg, np.random.default_rng(2))
        shaped = dict(base)
        shaped["out.special.weight"].data[...] = rng.standard_normal(shaped["out.special.weight"].shape) * 0.1
        for size in (8, 64, 70, 127):
            img = rng.random((size, size, 3)).astype(np.float32)
            assert enhance(img, shaped, cfg).shape == (size, size, 3)
            g = math.ceil(size / 8)
            assert head_forward(Tensor(img.transpose(2, 0, 1)[None]), head, cfg).grid == (g, g)


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_metric_oracles():
    with criterion(4, "metric oracle equivalence"):
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            dets, gts = random_instance(rng, max_det=10, max_gt=5)
            for thr in (0.5, 0.75):
                flags, _ = greedy_consistent_flags(dets, gts, thr) if len(dets) <= 6 else (None, None)
                m = match_detections(dets, gts, thr)
                if flags is not None:
                    assert m.true_positive.tolist() == flags
                worst = max(worst, abs(average_precision(m) - envelope_ap_oracle(m.true_positive.tolist(), len(gts))))
            # per-threshold oracle for map_range on a two-image split of the same instance
            half = len(gts) // 2
            img_gts = [gts[:half], gts[half:]]
            img_dets = [[], []]
            for d in dets:
                img_dets[0 if rng.random() < 0.5 else 1].append(d)
            m50, m5095, aps = map_range(img_dets, img_gts)
            oracle = []
            for t in IOU_THRESHOLDS:
                pooled = []
                for d_i, g_i in zip(img_dets, img_gts):
                    mm = match_detections(d_i, g_i, t)
                    pooled += list(zip(mm.confidences.tolist(), mm.true_positive.tolist()))
                pooled.sort(key=lambda x: -x[0])
                oracle.append(envelope_ap_oracle([f for _, f in pooled], len(gts)))
            worst = max(worst, abs(m50 - oracle[0]), abs(m5095 - sum(oracle) / len(oracle)))
        print(f"  max deviation from enumeration oracle: {worst:.2e}")
        assert worst < 1e-9

        gts = [[BoundingBox(0.3, 0.3, 0.2, 0.2)], [BoundingBox(0.6, 0.5, 0.3, 0.4), BoundingBox(0.2, 0.8, 0.1, 0.1)]]
        report = evaluate_detections([[Detection(g, 0.9) for g in img] for img in gts], gts)
        assert (report.map50, report.map50_95, report.precision, report.recall) == (1.0, 1.0, 1.0, 1.0)

        gt = BoundingBox.from_corners(0.0, 0.0, 0.5, 0.5)
        side = 0.5 * math.sqrt(0.62)
        m50, m5095, _ = map_range([[Detection(BoundingBox.from_corners(0.0, 0.0, side, side), 0.9)]], [[gt]])
        assert m50 == 1.0 and abs(m5095 - 0.3) < 1e-12
        elapsed = time.perf_counter() - start
        assert elapsed < 30, f"took {elapsed:.0f}s"


# ------------------------------------------------------------ criteria 5 and 6


@pytest.fixture(scope="session")
def acceptance_fixture():
    return make_fixture(4, seed=FIXTURE_SEED, **FIXTURE_KWARGS)


class TrainingRuns:
    """Lazily trained joint and head-only models, shared by criteria 5 and 6."""

    def __init__(self, samples):
        self.samples = samples
        self.cache = {}

    def get(self, seed: int, trainable: str):
        key = (seed, trainable)
        if key not in self.cache:
            start = time.perf_counter()
            cfg = TrainConfig(steps=TRAIN_STEPS, seed=seed, trainable=trainable)
            params, state, losses = train(cfg, self.samples, NetConfig())
            self.cache[key] = (params, state, losses, time.perf_counter() - start)
        return self.cache[key]


@pytest.fixture(scope="session")
def training_runs(acceptance_fixture):
    return TrainingRuns(acceptance_fixture)


def fixture_map50(params, samples) -> float:
    cfg = NetConfig()
    dets = []
    with T.no_grad():
        for img, _ in samples:
            pred = head_forward(enhance_tensor(img.transpose(2, 0, 1)[None], params, cfg), params, cfg)
            dets.append(decode_predictions(pred, 0.001, 0.5))
    return map_range(dets, [g for _, g in samples])[0]


def test_criterion_5_overfit(training_runs, acceptance_fixture, tmp_path):
    with criterion(5, "end-to-end training plumbing"):
        assert all(1 <= len(g) <= 3 for _, g in acceptance_fixture)
        assert all(img.shape == (64, 64, 3) for img, _ in acceptance_fixture)
        params, state, losses, elapsed = training_runs.get(SEEDS[0], "all")
        ratio = losses[-1] / losses[0]
        smoothed = float(np.mean(losses[-10:])) / losses[0]
        print(f"  initial loss {losses[0]:.4f}, final {losses[-1]:.4f}, ratio {ratio:.4f} "
              f"(last-10 mean ratio {smoothed:.4f}), {elapsed:.0f}s")
        assert state.step == TRAIN_STEPS
        assert ratio <= 0.10 and smoothed <= 0.10
        assert elapsed < 300, f"took {elapsed:.0f}s"

        # a fresh run with the same seed must retrace the same trajectory bit for bit
        prefix = 20
        blobs = []
        for run in range(2):
            p, s, l = train(TrainConfig(steps=prefix, seed=SEEDS[0]), acceptance_fixture, NetConfig())
            assert l == losses[:prefix]
            save_checkpoint(p, s, tmp_path / f"r{run}.ckpt")
            blobs.append((tmp_path / f"r{run}.ckpt").read_bytes())
        assert blobs[0] == blobs[1]


def test_criterion_6_task_driven_enhancement(training_runs, acceptance_fixture):
    with criterion(6, "jointly trained enhancer beats frozen identity"):
        rows = []
        for seed in SEEDS:
            joint = fixture_map50(training_runs.get(seed, "all")[0], acceptance_fixture)
            head_only = fixture_map50(training_runs.get(seed, "head")[0], acceptance_fixture)
            rows.append((seed, joint, head_only))
            print(f"  seed {seed}: mAP@0.5 joint {joint:.4f} vs head-only {head_only:.4f}")
        losing = [r for r in rows if not r[1] > r[2]]
        assert not losing, f"joint training did not win for seeds {[r[0] for r in losing]}: {rows}"


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_determinism_and_formats(tmp_path):
    with criterion(7, "determinism and formats"):
        cfg = NetConfig()
        samples = make_fixture(2, seed=7, size=16)
        ckpts = []
        for run in range(2):
            params, state, _ = train(TrainConfig(steps=3, seed=11, batch_size=2), samples, cfg)
            path = tmp_path / f"run{run}.ckpt"
            save_checkpoint(params, state, path)
            ckpts.append(path.read_bytes())
        assert ckpts[0] == ckpts[1], "same seed produced different checkpoints"

        loaded, lstate = load_checkpoint(tmp_path / "run0.ckpt", model_shapes(cfg))
        for k in params:
            assert loaded[k].data.tobytes() == params[k].data.tobytes()
            assert lstate.m[k].tobytes() == state.m[k].tobytes() and lstate.v[k].tobytes() == state.v[k].tobytes()
        assert lstate.step == state.step
        save_checkpoint(loaded, lstate, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == ckpts[0]

        rng = np.random.default_rng(0)
        levels = rng.integers(0, 256, (17, 23, 3))
        write_ppm((levels / 255.0).astype(np.float32), tmp_path / "a.ppm")
        back = read_ppm(tmp_path / "a.ppm")
        assert np.array_equal(np.round(back * 255).astype(int), levels)
        write_ppm(back, tmp_path / "b.ppm")
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

        reports = []
        for _ in range(2):
            dets = []
            with T.no_grad():
                for img, _ in samples:
                    pred = head_forward(enhance_tensor(img.transpose(2, 0, 1)[None], loaded, cfg), loaded, cfg)
                    dets.append(decode_predictions(pred, 0.001, 0.5))
            report = evaluate_detections(dets, [g for _, g in samples])
            report.fps = 0.0  # timing is the one non-deterministic field
            reports.append(report.render())
        assert reports[0] == reports[1]
        assert set(parse_report(reports[0])) >= {"map50", "map50_95", "precision", "recall"}
        assert OptimizerState.zeros_like(loaded).step == 0


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_throughput_harness():
    with criterion(8, "throughput harness"):
        cfg = NetConfig()
        params = init_params(cfg, np.random.default_rng(0))
        params.update(init_head_params(cfg, np.random.default_rng(1)))
        img = np.random.default_rng(2).random((1, 3, 64, 64)).astype(np.float32)

        def pipeline():
            with T.no_grad():
                return head_forward(enhance_tensor(img, params, cfg), params, cfg)

        result = fps_bench(pipeline, warmup=5, iters=100, repetitions=5)
        print(f"  fps {result.mean_fps:.2f}, cv {result.cv:.4f}, runs {[round(r, 2) for r in result.runs]}")
        assert len(result.runs) == 5 and result.mean_fps > 0
        assert result.cv < 0.10
