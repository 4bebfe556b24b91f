"""Acceptance suite: one test per criterion, each with its runtime budget.

A PASS/FAIL line per criterion is printed in the terminal summary.
The training smoke runs take several minutes; select or skip them with
``-m slow`` / ``-m "not slow"``.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest
from PIL import Image

from oracles import fd_check, fd_check_module, naive_dct2, naive_dft2, naive_idft2
from sfnet import spectral
from sfnet.autodiff import (
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    crop,
    default_dtype,
    elementwise,
    matmul,
    maxpool2d,
    mean,
    no_grad,
    pad,
    pool_global,
    relu,
    reshape,
    scale,
    select,
    sigmoid,
    stack,
    sum_,
    transpose,
)
from sfnet.data import FAKE, REAL, DatasetManifest, Sample, synth_dataset
from sfnet.experiments import checkpoint as ckpt_io
from sfnet.experiments import commands
from sfnet.experiments.config import RunConfig
from sfnet.model import CBAM, FCL, HFRF, VARIANTS, ProjectionUnit, RefineGroup, SFNet, SFNetConfig
from sfnet.spectral import ComplexSpectrum, HighPassSpec
from sfnet.training import (
    AugmentationPolicy,
    Metrics,
    Trainer,
    cross_entropy,
    evaluate,
    predict,
    steps_per_epoch,
)


@pytest.fixture
def criterion(acceptance_log):
    @contextmanager
    def run(key, title, limit):
        info = {"note": ""}
        start = time.perf_counter()
        ok = False
        try:
            yield info
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            acceptance_log[key] = (title, ok and elapsed < limit, elapsed, limit, info["note"])
        assert elapsed < limit, f"criterion {key} took {elapsed:.1f}s (limit {limit}s)"

    return run


# -- 1 --------------------------------------------------------------------

def test_1_spectral_oracles(criterion):
    with criterion("1", "spectral oracle suite", 10):
        rng = np.random.default_rng(101)
        for n in (8, 16):
            for _ in range(3):
                x = rng.random((n, n)).astype(np.float32)
                ref = naive_dft2(x)
                got = spectral.fft2(Tensor(x)).to_numpy()
                assert np.max(np.abs(got - ref)) < 1e-3
                back = spectral.ifft2(ComplexSpectrum(Tensor(ref.real), Tensor(ref.imag))).data
                assert np.max(np.abs(back - naive_idft2(ref).real)) < 1e-3
                assert np.max(np.abs(spectral.dct2(Tensor(x)).data - naive_dct2(x))) < 1e-3
        x = rng.random((2, 3, 16, 16)).astype(np.float32)
        assert np.max(np.abs(spectral.ifft2(spectral.fft2(Tensor(x))).data - x)) < 1e-5
        for n in (8, 16, 64):
            x = rng.standard_normal((n, n))
            z = spectral.fft2(Tensor(x)).to_numpy()
            e_space = np.sum(x ** 2)
            e_freq = np.sum(np.abs(z) ** 2) / (n * n)
            assert abs(e_space - e_freq) / e_space < 1e-3


# -- 2 --------------------------------------------------------------------

def test_2_highpass_mask(criterion, tmp_path):
    with criterion("2", "high-pass mask properties and sweep phi column", 5):
        bound = 2 * (64 + 64) / (64 * 64)
        rng = np.random.default_rng(202)
        x = rng.standard_normal((2, 3, 64, 64)).astype(np.float32)
        for s in (3, 4, 5, 8, 64):
            spec = HighPassSpec(64, 64, s)
            assert abs(spec.zero_fraction() - 4 / s ** 2) <= bound
            once = spectral.high_pass(spectral.fftshift(spectral.fft2(Tensor(x))), spec)
            twice = spectral.high_pass(once, spec)
            assert np.array_equal(once.real.data, twice.real.data)
            assert np.array_equal(once.imag.data, twice.imag.data)
        rc = RunConfig(synth_per_class=2, epochs=0, batch_size=4, seed=0, output_dir=str(tmp_path),
                       model={"base_channels": 8, "mlp_reduction_ratio": 4, "refine_groups": 1,
                              "blocks_per_group": 1})
        rows = commands.cmd_sweep_lowfreq(rc)
        phi = [r["phi"] for r in rows]
        assert phi == ["0.444444", "0.250000", "0.160000", "0.062500", "0.000977"]
        table = commands.read_csv(tmp_path / "sweep_lowfreq.csv")
        assert [r["phi"] for r in table] == phi


# -- 3 --------------------------------------------------------------------

def _op_checks(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    img = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.3
    bias = rng.standard_normal(4)
    gamma = rng.random(3) + 0.5
    beta = rng.standard_normal(3)
    spec = HighPassSpec(8, 8, 4.0)
    spread = rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) / 10.0
    yield "add", lambda x, y: x + y, [a, b], 1e-3
    yield "sub", lambda x, y: x - y, [a, b], 1e-3
    yield "mul", lambda x, y: x * y, [a, b], 1e-3
    yield "broadcast", lambda x, y: x * y, [a, b[:1]], 1e-3
    yield "relu", relu, [a + 0.05 * np.sign(a)], 1e-3
    yield "sigmoid", sigmoid, [a], 1e-3
    yield "neg", lambda x: elementwise("neg", x), [a], 1e-3
    yield "scale", lambda x: scale(x, 2.5), [a], 1e-3
    yield "sum", lambda x: sum_(x), [a], 1e-3
    yield "matmul", matmul, [a, rng.standard_normal((4, 2))], 1e-3
    yield "conv2d", lambda x, k, c: conv2d(x, k, c, 1, 1), [img, w, bias], 1e-3
    yield "conv2d stride 2", lambda x, k, c: conv2d(x, k, c, 2, 1), [img, w, bias], 1e-3
    # distinct, well-separated values keep every window's maximum unique
    yield "maxpool2d", maxpool2d, [spread], 1e-3
    yield "global avg pool", lambda t: pool_global(t, "avg", "spatial"), [img], 1e-3
    yield "global max pool", lambda t: pool_global(t, "max", "channel"), [spread], 1e-3
    yield "batchnorm2d", lambda x, g, be: batchnorm2d(
        x, g, be, np.zeros(3), np.ones(3), training=True), [img, gamma, beta], 1e-3
    yield "reshape", lambda x: reshape(x, (4, 3)), [a], 1e-3
    yield "transpose", lambda x: transpose(x, (1, 0)), [a], 1e-3
    yield "concat", lambda x, y: concat([x, y], axis=0), [a, b], 1e-3
    yield "stack", lambda x, y: stack([x, y], axis=1), [a, b], 1e-3
    yield "select", lambda x: select(x, 2, axis=1), [a], 1e-3
    yield "pad", lambda x: pad(x, ((1, 0), (0, 2))), [a], 1e-3
    yield "crop", lambda x: crop(x, (slice(0, 2), slice(1, 4))), [a], 1e-3
    yield "mean", lambda x: mean(x, axis=1), [a], 1e-3
    yield "cross_entropy", lambda z: cross_entropy(z, [1, 0, 1]), [rng.standard_normal((3, 2))], 1e-3
    yield "fft2", lambda x: spectral.fft2(x).real * 1.0 + spectral.fft2(x).imag * 0.5, [img], 1e-3
    yield "ifft2", lambda re, im: spectral.ifft2(ComplexSpectrum(re, im), strict=False), \
        [img, rng.standard_normal(img.shape)], 1e-3
    yield "amp_phase", lambda re, im: _amp_phase_sum(re, im), [img + 0.1, img[::-1] + 0.2], 1e-3
    yield "hfri", lambda x: spectral.hfri(x, spec), [img], 1e-3
    yield "channel high-pass", lambda x: spectral.high_frequency(
        x, HighPassSpec(4, 4, 4.0), spectral.CHANNEL), [img], 1e-3
    yield "dct2", spectral.dct2, [rng.standard_normal((8, 8))], 1e-3


def _amp_phase_sum(re, im):
    amp, ph = spectral.amp_phase(ComplexSpectrum(re, im))
    return amp * 1.0 + ph * 0.7


def test_3_gradient_suite(criterion):
    with criterion("3", "finite-difference gradient suite", 120) as info:
        rng = np.random.default_rng(303)
        worst = {}
        for name, fn, inputs, tol in _op_checks(rng):
            err = fd_check(fn, inputs)
            worst[name] = err
            assert err < tol, f"{name}: rel err {err:.2e}"

        def built(factory):
            with default_dtype(np.float64):
                return factory()

        r = np.random.default_rng(0)
        modules = {
            "fcl": (built(lambda: FCL(4, r)), (1, 4, 8, 8)),
            "hfrf channel": (built(lambda: HFRF(8, "channel", 4.0, r)), (1, 8, 8, 8)),
            "hfrf spatial": (built(lambda: HFRF(8, "spatial", 4.0, r)), (1, 8, 8, 8)),
            "cbam": (built(lambda: CBAM(8, 4, r)), (1, 8, 8, 8)),
            "projection_unit": (built(lambda: ProjectionUnit(8, r)), (1, 8, 8, 8)),
            "refine group": (built(lambda: RefineGroup(8, 2, True, 4, r)), (2, 8, 8, 8)),
        }
        for name, (mod, shape) in modules.items():
            err = fd_check_module(mod, rng.standard_normal(shape))
            worst[name] = err
            assert err < 1e-3, f"{name}: rel err {err:.2e}"

        model = built(lambda: SFNet(SFNetConfig(base_channels=8, input_extent=16,
                                                mlp_reduction_ratio=8), seed=0))
        model.eval()
        err = fd_check_module(model, rng.random((1, 3, 16, 16)), n_coords=5,
                              forward=lambda x: mean(model(x)))
        worst["end to end"] = err
        assert err < 1e-2, f"end to end: rel err {err:.2e}"
        top = max(worst, key=worst.get)
        info["note"] = f"{len(worst)} checks, worst {top} {worst[top]:.1e}"


# -- 4 --------------------------------------------------------------------

def _attention_maps(model, taps):
    maps = []
    prev = taps["fused"]
    for i, group in enumerate(model.refine.groups):
        f = prev
        for block in group.blocks:
            f = block(f)
        if group.cbam is not None:
            ca = group.cbam.channel(f)
            maps.append(ca.data)
            maps.append(group.cbam.spatial(ca * f).data)
        prev = taps[f"refine.{i}"]
    return maps


def test_4_architecture_contracts(criterion):
    with criterion("4", "architecture contracts for all six variants", 30):
        x = Tensor(np.random.default_rng(404).random((2, 3, 64, 64)).astype(np.float32))
        for name in VARIANTS:
            model = SFNet(SFNetConfig.variant(name, SFNetConfig()), seed=0)
            model.eval()
            taps = {}
            with no_grad():
                logits = model(x, taps).data
                feats = model.branch_features(x)
                maps = _attention_maps(model, taps)
            assert logits.shape == (2, 2) and np.isfinite(logits).all(), name
            z = logits.astype(np.float64)
            p = np.exp(z - z.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)
            shapes = {k: v.shape for k, v in feats.items()}
            assert len(set(shapes.values())) == 1, shapes
            if model.cfg.branch_mode == "both":
                assert shapes["image"] == shapes["frequency"]
            assert bool(maps) == model.cfg.attention_enabled
            for m in maps:
                assert np.all((m > 0) & (m < 1)), name


# -- 5 --------------------------------------------------------------------

DESK_EPOCHS = 50


@pytest.fixture(scope="module")
def desk_splits():
    return commands.prepare_data(RunConfig(synth_per_class=256, seed=0))


def _train_until(splits, cfg, target=0.9, epochs=DESK_EPOCHS, lr0=1e-3, seed=0):
    """Train on the full cosine schedule, evaluating after every epoch.

    Returns ``(best_oa, epochs_run)``; stops as soon as ``target`` is met.
    """
    model = SFNet(cfg, seed=seed)
    trainer = Trainer(model, AugmentationPolicy(()), epochs,
                      steps_per_epoch(len(splits.x_train), 16), lr0=lr0, seed=seed, batch_size=16)
    best = 0.0
    for epoch in range(1, epochs + 1):
        trainer.train_epoch(splits.x_train, splits.y_train)
        best = max(best, evaluate(model, splits.x_val, splits.y_val).oa)
        if best >= target:
            return best, epoch
    return best, epochs


@pytest.mark.slow
def test_5a_full_model_reaches_90(criterion, desk_splits):
    with criterion("5a", "SFNet reaches 90% validation OA on synthetic data", 900) as info:
        assert len(desk_splits.x_train) == 256 and len(desk_splits.x_val) == 256
        oa, epochs = _train_until(desk_splits, SFNetConfig(base_channels=32))
        info["note"] = f"OA {oa:.3f} after {epochs} epoch(s)"
        assert oa >= 0.9


@pytest.mark.slow
def test_5b_frequency_only_reaches_90(criterion, desk_splits):
    with criterion("5b", "frequency-only variant reaches 90% validation OA", 900) as info:
        cfg = SFNetConfig.variant("SFNet-Frequency with att", SFNetConfig(base_channels=32))
        oa, epochs = _train_until(desk_splits, cfg)
        info["note"] = f"OA {oa:.3f} after {epochs} epoch(s)"
        assert oa >= 0.9


def _train_mode_accuracy(model, x, y):
    """Accuracy of the training-mode forward (batch statistics), without an update."""
    buffers = {k: v.copy() for k, v in model.named_buffers()}
    model.train()
    with no_grad():
        acc = float(np.mean(predict(model(Tensor(x)).data) == y))
    for k, v in model.named_buffers():
        v[...] = buffers[k]
    return acc


@pytest.mark.slow
def test_5c_overfit_one_batch(criterion, desk_splits):
    with criterion("5c", "overfit one batch to 100% within 30 epochs", 900) as info:
        x, y = desk_splits.x_train[:16], desk_splits.y_train[:16]
        model = SFNet(SFNetConfig(), seed=0)
        trainer = Trainer(model, AugmentationPolicy(()), 30, 1, lr0=1e-3, batch_size=16)
        first, losses = None, []
        for epoch in range(1, 31):
            losses.append(trainer.train_epoch(x, y).mean_loss)
            acc = _train_mode_accuracy(model, x, y)
            if acc == 1.0 and first is None:
                first = epoch
        eval_acc = evaluate(model, x, y).oa
        info["note"] = (f"first 100% at epoch {first}, final train accuracy {acc:.3f}, "
                        f"loss {losses[0]:.3f} -> {losses[-1]:.2e}, eval-mode accuracy {eval_acc:.3f}")
        assert first is not None and acc == 1.0
        assert losses[-1] < 0.1 * losses[0]


# -- 6 --------------------------------------------------------------------

class _Preset:
    """Model stand-in that emits fixed logits, batch by batch."""

    training = False

    def __init__(self, logits):
        self.logits = np.asarray(logits, np.float32)
        self.at = 0

    def eval(self):
        pass

    def train(self, mode=True):
        pass

    def __call__(self, x):
        out = self.logits[self.at:self.at + x.shape[0]]
        self.at += x.shape[0]
        return Tensor(out)


def _logits_for(preds):
    return np.eye(2, dtype=np.float32)[np.asarray(preds)]


def test_6_metrics(criterion):
    with criterion("6", "metrics confusion arithmetic", 5):
        cases = [
            # labels, predictions, (tp, fp, fn, tn), (oa, p, r, f1)
            ([1] * 4 + [0] * 6, [1, 1, 1, 0, 1, 0, 0, 0, 0, 0], (3, 1, 1, 5), (0.8, 0.75, 0.75, 0.75)),
            ([0, 1] * 5, [0, 1] * 5, (5, 0, 0, 5), (1.0, 1.0, 1.0, 1.0)),
            ([0, 1] * 5, [1] * 10, (5, 5, 0, 0), (0.5, 0.5, 1.0, 2 / 3)),
            ([0, 1] * 5, [0] * 10, (0, 0, 5, 5), (0.5, 0.0, 0.0, 0.0)),
        ]
        for labels, preds, counts, expect in cases:
            n = len(labels)
            m = evaluate(_Preset(_logits_for(preds)), np.zeros((n, 3, 2, 2), np.float32),
                         np.array(labels), batch_size=3)
            assert (m.tp, m.fp, m.fn, m.tn) == counts
            assert (m.oa, m.precision, m.recall, m.f1) == pytest.approx(expect, abs=0, rel=1e-15)
        assert evaluate(_Preset(_logits_for([0] * 10)), np.zeros((10, 3, 2, 2), np.float32),
                        np.array([0, 1] * 5)).undefined == {"precision", "f1"}
        rng = np.random.default_rng(606)
        for tp, fp, fn, tn in rng.integers(0, 50, size=(1000, 4)):
            m = Metrics(int(tp), int(fp), int(fn), int(tn))
            n = tp + fp + fn + tn
            assert m.total == n
            assert m.oa == ((tp + tn) / n if n else 0.0)
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            assert (m.precision, m.recall) == (p, r)
            assert m.f1 == (2 * p * r / (p + r) if p + r else 0.0)
            if p > 0 and r > 0:
                assert min(p, r) - 1e-12 <= m.f1 <= max(p, r) + 1e-12


# -- 7 --------------------------------------------------------------------

def test_7_determinism_and_persistence(criterion, tmp_path):
    with criterion("7", "replay determinism and checkpoint persistence", 180):
        def rc(name):
            return RunConfig(synth_per_class=32, epochs=3, batch_size=16, seed=5,
                             augment=("random_crop", "horizontal_flip", "mixup"),
                             model={"base_channels": 16, "input_extent": 32,
                                    "mlp_reduction_ratio": 8},
                             output_dir=str(tmp_path / name))

        a = commands.cmd_train(rc("a"))
        b = commands.cmd_train(rc("b"))
        hist = (a.run_dir / "history.csv").read_bytes()
        assert hist == (b.run_dir / "history.csv").read_bytes()
        assert len(hist.splitlines()) == 4

        x = np.random.default_rng(707).random((4, 3, 32, 32)).astype(np.float32)
        a.model.eval()
        with no_grad():
            before = a.model(Tensor(x)).data
        loaded = ckpt_io.load(a.checkpoint)
        with no_grad():
            after = loaded.build_model()(Tensor(x)).data
        assert before.tobytes() == after.tobytes()
        ckpt_io.write(tmp_path / "resaved.sfn", loaded)
        assert (tmp_path / "resaved.sfn").read_bytes() == a.checkpoint.read_bytes()


# -- 8 --------------------------------------------------------------------

def test_8_visualisation(criterion, tmp_path):
    with criterion("8", "DCT and Grad-CAM visualisation contracts", 60):
        flat = [Sample(label, f"c/{label}/{i}", image=np.full((3, 32, 32), v, np.float32))
                for i, v in enumerate((0.2, 0.5, 0.8)) for label in (REAL, FAKE)]
        out = commands.cmd_dct_viz(DatasetManifest(flat), tmp_path / "flat")
        for name in ("real", "fake"):
            img = np.asarray(Image.open(tmp_path / "flat" / f"dct_{name}.png"))
            assert img.shape == (32, 32)
            assert img[0, 0] == img.max() > 0
            assert np.count_nonzero(img) == 1

        out = commands.cmd_dct_viz(synth_dataset(64, 64, seed=0), tmp_path / "synth")
        for name in ("real", "fake"):
            assert np.asarray(Image.open(tmp_path / "synth" / f"dct_{name}.png")).shape == (64, 64)
        assert commands.high_band_mean(out["images"]["fake"]) < commands.high_band_mean(out["images"]["real"])

        model = SFNet(SFNetConfig(), seed=8)
        ck = ckpt_io.save(tmp_path / "m.sfn", model)
        sample = synth_dataset(1, 64, seed=8).samples[1].image
        img_path = tmp_path / "probe.png"
        Image.fromarray(np.round(255 * sample.transpose(1, 2, 0)).astype(np.uint8)).save(img_path)
        cam = commands.cmd_gradcam(ck, img_path, 1, None, tmp_path / "cam.png")
        assert cam.shape == (64, 64)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        assert np.asarray(Image.open(tmp_path / "cam.png")).shape == (64, 64, 3)
