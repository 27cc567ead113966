import csv
import io
from collections import deque
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fseft.engines import (
    AdaptConfig,
    BenchmarkConfig,
    Checkpoint,
    PretrainConfig,
    adapt,
    adapt_sweep,
    binarize_and_largest_cc,
    dice_score,
    lr_at,
    masked_eval_loss,
    pretrain,
    run_benchmark,
    sliding_window_predict,
    tile_origins,
)
from fseft.engines.benchmark import TaskFactory, summary_table, write_results
from fseft.errors import ConfigError, InvalidArgument, InvalidShape, TrainingDiverged
from fseft.nets import Backbone, SegHead, parameters_equal
from fseft.phantoms import DatasetSpec, OrganSpec, build_assembly, build_fewshot_task
from fseft.volume import Volume

GRID = (16, 16, 16)
PATCH = (16, 16, 16)


def organ(c, cx, cy, mean):
    return OrganSpec(c, ((cx - 0.02, cx + 0.02), (cy - 0.02, cy + 0.02), (0.48, 0.52)), ((0.14, 0.18),) * 3, (mean, 0.02))


ORGANS = (organ(0, 0.27, 0.27, 0.6), organ(1, 0.73, 0.27, 0.7), organ(2, 0.27, 0.73, 0.8))


def spec(name, n, w):
    return DatasetSpec(name, n, w, ORGANS, grid_shape=GRID)


@pytest.fixture(scope="module")
def corpus():
    return build_assembly([spec("a", 2, (1, 1, 0)), spec("b", 2, (1, 0, 0))], seed=0)


@pytest.fixture(scope="module")
def checkpoint(corpus):
    torch.manual_seed(0)
    bb, hd = Backbone(features=4, widths=(4, 8)), SegHead(4, 3)
    return pretrain(corpus, bb, hd, PretrainConfig(epochs=2, warmup_epochs=1, patch_size=PATCH, patches_per_volume=1))


@pytest.fixture(scope="module")
def target():
    return spec("t", 1, (1, 1, 1)).shifted(intensity_shift=0.02)


def small_adapt(strategy, **kw):
    base = dict(strategy=strategy, epochs=4, ti_start_epoch=2, patches_per_volume=1, patch_size=PATCH, seed=1)
    base.update(kw)
    return AdaptConfig(**base)


# ---------------------------------------------------------------------------
# sliding window
# ---------------------------------------------------------------------------


def conv_stub(seed=0, channels=1):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(channels, 1, 3, 3, 3, generator=g, dtype=torch.float64)
    return lambda x: torch.sigmoid(torch.nn.functional.conv3d(x.double(), w, padding=1))


class TestSlidingWindow:
    def test_single_tile(self):
        f = conv_stub()
        x = torch.randn(32, 32, 32, dtype=torch.float64)
        out = sliding_window_predict(f, x, (32, 32, 32), overlap=0.0)
        assert torch.allclose(out, f(x[None, None])[0], atol=1e-6)

    def test_constant_stub(self):
        f = lambda x: torch.full((1, 2, *x.shape[2:]), 0.3, dtype=torch.float64)
        out = sliding_window_predict(f, torch.zeros(40, 35, 20), (16, 16, 16), overlap=0.25)
        assert out.shape == (2, 40, 35, 20)
        assert torch.allclose(out, torch.tensor(0.3, dtype=torch.float64))

    def test_tile_enumeration_oracle(self):
        f = conv_stub(1)
        x = torch.randn(48, 48, 48, dtype=torch.float64)
        out = sliding_window_predict(f, x, (32, 32, 32), overlap=0.5).numpy()
        acc = np.zeros((48, 48, 48))
        cnt = np.zeros((48, 48, 48))
        for i in (0, 16):
            for j in (0, 16):
                for k in (0, 16):
                    tile = f(x[i : i + 32, j : j + 32, k : k + 32][None, None])[0, 0].numpy()
                    acc[i : i + 32, j : j + 32, k : k + 32] += tile
                    cnt[i : i + 32, j : j + 32, k : k + 32] += 1
        np.testing.assert_allclose(out[0], acc / cnt, atol=1e-6)

    def test_origins(self):
        assert tile_origins(48, 32, 0.5) == [0, 16]
        assert tile_origins(50, 32, 0.5) == [0, 16, 18]
        assert tile_origins(20, 32, 0.5) == [0]

    def test_pads_small_volume(self):
        f = conv_stub(2)
        out = sliding_window_predict(f, torch.randn(10, 12, 9), (16, 16, 16))
        assert out.shape == (1, 10, 12, 9)

    def test_bad_overlap(self):
        with pytest.raises(InvalidArgument):
            sliding_window_predict(conv_stub(), torch.zeros(16, 16, 16), (16, 16, 16), overlap=0.8)

    def test_volume_input_and_gradient(self):
        w = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
        f = lambda x: torch.sigmoid(w * x)
        vol = Volume(np.random.default_rng(0).normal(size=(20, 20, 20)))
        out = sliding_window_predict(f, vol, (16, 16, 16), 0.5)
        out.sum().backward()
        assert w.grad is not None and float(w.grad) != 0.0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(16, 30), st.integers(16, 30), st.sampled_from([0.0, 0.25, 0.5, 0.75]), st.integers(0, 100))
    def test_within_tile_range(self, nx, ny, overlap, seed):
        f = conv_stub(seed)
        x = torch.randn(nx, ny, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        out = sliding_window_predict(f, x, (16, 16, 16), overlap)[0].numpy()
        lo = np.full(out.shape, np.inf)
        hi = np.full(out.shape, -np.inf)
        for i in tile_origins(nx, 16, overlap):
            for j in tile_origins(ny, 16, overlap):
                t = f(x[i : i + 16, j : j + 16, :][None, None])[0, 0].numpy()
                sl = (slice(i, i + 16), slice(j, j + 16), slice(0, 16))
                lo[sl] = np.minimum(lo[sl], t)
                hi[sl] = np.maximum(hi[sl], t)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


# ---------------------------------------------------------------------------
# post-processing and metric
# ---------------------------------------------------------------------------


def flood_fill_components(binary):
    """Brute-force 26-connected components in raster order of first voxel."""
    seen = np.zeros(binary.shape, bool)
    comps = []
    for start in zip(*np.nonzero(binary)):
        if seen[start]:
            continue
        comp, queue = [], deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            comp.append(v)
            for d in np.ndindex(3, 3, 3):
                n = tuple(a + b - 1 for a, b in zip(v, d))
                if all(0 <= c < s for c, s in zip(n, binary.shape)) and binary[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        comps.append(comp)
    return comps


def largest_cc_oracle(probs, threshold=0.5):
    comps = flood_fill_components(probs > threshold)
    out = np.zeros(probs.shape, np.uint8)
    if comps:
        best = max(comps, key=lambda c: (len(c), [-x for x in min(c)]))
        for v in best:
            out[v] = 1
    return out


class TestLargestCC:
    def test_all_below(self):
        assert binarize_and_largest_cc(np.full((4, 4, 4), 0.49)).data.sum() == 0

    def test_five_vs_three(self):
        p = np.zeros((8, 8, 8))
        for v in [(1, 1, 1), (1, 1, 2), (1, 2, 2), (2, 2, 2), (2, 2, 3)]:
            p[v] = 0.9
        for v in [(6, 6, 6), (6, 6, 7), (7, 7, 7)]:
            p[v] = 0.9
        out = binarize_and_largest_cc(p).data[0]
        np.testing.assert_array_equal(out, largest_cc_oracle(p))
        assert out.sum() == 5 and out[1, 1, 1] == 1 and out[6, 6, 6] == 0

    def test_tie_goes_to_smallest_index(self):
        p = np.zeros((8, 8, 8))
        p[5, 5, 2:6] = 1.0  # first raster voxel (5,5,2)
        p[2, 0, 4:8] = 1.0  # first raster voxel (2,0,4) -> wins
        out = binarize_and_largest_cc(p).data[0]
        assert out[2, 0, 4] == 1 and out[5, 5, 2] == 0 and out.sum() == 4

    def test_diagonal_is_connected(self):
        p = np.zeros((4, 4, 4))
        p[0, 0, 0] = p[1, 1, 1] = p[3, 3, 3] = 1
        assert binarize_and_largest_cc(p).data.sum() == 2

    def test_threshold_is_strict(self):
        assert binarize_and_largest_cc(np.full((3, 3, 3), 0.5)).data.sum() == 0

    @pytest.mark.parametrize("seed", range(8))
    def test_random_against_flood_fill(self, seed):
        p = np.random.default_rng(seed).uniform(size=(10, 10, 10)) * 0.8
        out = binarize_and_largest_cc(p).data[0]
        np.testing.assert_array_equal(out, largest_cc_oracle(p))
        assert len(flood_fill_components(out.astype(bool))) == 1


class TestDice:
    def test_equal(self):
        m = np.zeros((4, 4, 4))
        m[1:3] = 1
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4, 4)), np.zeros((4, 4, 4))
        a[0], b[3] = 1, 1
        assert dice_score(a, b) == 0.0

    def test_half(self):
        a, b = np.zeros(8), np.zeros(8)
        a[[0, 1]] = 1
        b[[1, 2]] = 1
        assert dice_score(a, b) == 0.5

    def test_both_empty(self):
        assert dice_score(np.zeros(5), np.zeros(5)) == 1.0

    def test_shape(self):
        with pytest.raises(InvalidShape):
            dice_score(np.zeros(5), np.zeros(6))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(2, 6, 6, 6)) > rng.uniform(size=2)[:, None, None, None]
        assert dice_score(a, b) == dice_score(b, a)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def test_lr_schedule():
    assert lr_at(0, 10, 1.0, 2) == 0.5 and lr_at(1, 10, 1.0, 2) == 1.0
    assert lr_at(2, 10, 1.0, 2) == 1.0 and lr_at(10, 10, 1.0, 2) == pytest.approx(0.0, abs=1e-12)


class TestPretrain:
    def test_smoke(self, checkpoint, corpus, tmp_path):
        assert len(checkpoint.curve) == 2 and all(np.isfinite(c["loss"]) for c in checkpoint.curve)
        checkpoint.save(tmp_path / "c.safetensors")
        loaded = Checkpoint.load(tmp_path / "c.safetensors")
        assert loaded.header["n_classes"] == 3 and len(loaded.curve) == 2
        a = masked_eval_loss(loaded, corpus, PATCH)
        b = masked_eval_loss(Checkpoint.load(tmp_path / "c.safetensors"), corpus, PATCH)
        assert a == b and np.isfinite(a)

    def test_never_annotated_class_head_untouched(self, corpus):
        torch.manual_seed(3)
        bb, hd = Backbone(features=4, widths=(4, 8)), SegHead(4, 3)
        w0, b0 = hd.conv.weight[2].detach().clone(), hd.conv.bias[2].detach().clone()
        other = hd.conv.weight[0].detach().clone()
        pretrain(corpus, bb, hd, PretrainConfig(epochs=2, warmup_epochs=0, patch_size=PATCH, patches_per_volume=1))
        assert torch.equal(hd.conv.weight[2], w0) and torch.equal(hd.conv.bias[2], b0)
        assert not torch.equal(hd.conv.weight[0], other)

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        cfg = PretrainConfig(epochs=3, warmup_epochs=1, patch_size=PATCH, patches_per_volume=1, seed=5)

        def fresh():
            torch.manual_seed(7)
            return Backbone(features=4, widths=(4, 8)), SegHead(4, 3)

        full = pretrain(corpus, *fresh(), cfg)
        state = tmp_path / "state.pt"
        log = tmp_path / "log.jsonl"
        pretrain(corpus, *fresh(), cfg, state_path=state, log_path=log, stop_after=1)
        resumed = pretrain(corpus, *fresh(), cfg, state_path=state, log_path=log, resume=True)
        assert [c["lr"] for c in resumed.curve] == [c["lr"] for c in full.curve]
        assert resumed.header["epochs_done"] == 3
        assert parameters_equal(full.backbone.state_dict().values(), resumed.backbone.state_dict().values())
        assert len(log.read_text().splitlines()) == 3

    def test_nan_aborts(self, corpus):
        bad = [replace(corpus[0], volume=corpus[0].volume.with_data(np.full(GRID, np.nan, np.float32)))] + corpus[1:]
        with pytest.raises(TrainingDiverged) as info:
            pretrain(bad, Backbone(features=4, widths=(4, 8)), SegHead(4, 3),
                     PretrainConfig(epochs=1, warmup_epochs=0, patch_size=PATCH, patches_per_volume=1, batch_volumes=4))
        assert info.value.batch_ids and info.value.lr > 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PretrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            AdaptConfig(epochs=10, ti_start_epoch=11)


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


class Poison:
    def __getattr__(self, name):
        raise AssertionError("query ground truth was read during adaptation")

    def __array__(self, *a, **k):
        raise AssertionError("query ground truth was read during adaptation")


class TestAdapt:
    def test_generalization_noop(self, checkpoint, target):
        task = build_fewshot_task(target, 0, 1, seed=0)
        res = adapt(checkpoint, task, small_adapt("GENERALIZATION"))
        assert res.n_trainable == 0 and res.history == []
        assert parameters_equal(res.model.backbone.parameters(), checkpoint.backbone.parameters())
        assert parameters_equal(res.model.head.parameters(), checkpoint.head.parameters())

    @pytest.mark.parametrize("strategy", ["ADAPTER", "ADAPTER_TI", "LINEAR_PROBE", "FT_LAST"])
    def test_frozen_bit_identical(self, checkpoint, target, strategy):
        task = build_fewshot_task(target, 1, 2, seed=0)
        before = {k: v.clone() for k, v in checkpoint.backbone.state_dict().items()}
        res = adapt(checkpoint, task, small_adapt(strategy))
        after = res.model.backbone.state_dict()
        last = f"decoders.{len(checkpoint.backbone.decoders) - 1}."
        for k, v in before.items():
            if strategy == "FT_LAST" and k.startswith(last):
                continue
            assert torch.equal(v, after[k]), k
        assert parameters_equal(before.values(), checkpoint.backbone.state_dict().values())

    def test_lambda_zero_matches_adapter(self, checkpoint, target):
        task = build_fewshot_task(target, 0, 2, seed=1)
        a = adapt(checkpoint, task, small_adapt("ADAPTER"))
        b = adapt(checkpoint, task, small_adapt("ADAPTER_TI", lam=0.0))
        assert parameters_equal(a.model.head.parameters(), b.model.head.parameters())

    def test_penalty_schedule(self, checkpoint, target):
        task = build_fewshot_task(target, 0, 1, seed=2)
        res = adapt(checkpoint, task, small_adapt("ADAPTER_TI", epochs=6, ti_start_epoch=3, gamma=0.0))
        assert all(h["penalty"] == 0.0 for h in res.history[:3])
        assert any(h["penalty"] > 0.0 for h in res.history[3:])

    def test_fraction_units_rescale_penalty(self, checkpoint, target):
        task = build_fewshot_task(target, 0, 1, seed=2)
        n = task.query.data.size
        kw = dict(epochs=6, ti_start_epoch=3, gamma=0.0)
        vox = adapt(checkpoint, task, small_adapt("ADAPTER_TI", **kw))
        frac = adapt(checkpoint, task, small_adapt("ADAPTER_TI", size_units="fraction", **kw))
        assert frac.prior.S == pytest.approx(vox.prior.S / n)
        # first penalised epoch: same weights so far, so the sizes differ only by 1/n
        assert frac.history[3]["penalty"] == pytest.approx(vox.history[3]["penalty"] / n, rel=1e-5)
        with pytest.raises(ConfigError):
            small_adapt("ADAPTER_TI", size_units="litres")

    @pytest.mark.parametrize("mode", ["full", "patch"])
    def test_query_ground_truth_never_read(self, checkpoint, target, mode):
        task = build_fewshot_task(target, 2, 1, seed=3)
        task.query_gt = Poison()
        res = adapt(checkpoint, task, small_adapt("ADAPTER_TI", gamma=0.0, size_mode=mode))
        assert len(res.history) == 4

    def test_support_loss_decreases(self, checkpoint, target):
        task = build_fewshot_task(target, 1, 1, seed=4)
        res = adapt(checkpoint, task, small_adapt("ADAPTER", epochs=100, ti_start_epoch=100))
        assert res.history[-1]["support_loss"] <= 0.5 * res.history[0]["support_loss"]

    def test_seeded(self, checkpoint, target):
        task = build_fewshot_task(target, 1, 1, seed=4)
        a = adapt(checkpoint, task, small_adapt("FT"))
        b = adapt(checkpoint, task, small_adapt("FT"))
        assert parameters_equal(a.model.parameters(), b.model.parameters())

    def test_sweep_matches_independent_runs(self, checkpoint, target):
        task = build_fewshot_task(target, 0, 2, seed=5)
        cfgs = [
            small_adapt("ADAPTER"),
            small_adapt("ADAPTER_TI", gamma=0.0),
            small_adapt("ADAPTER_TI", gamma=0.3, lam=2.0),
        ]
        swept = adapt_sweep(checkpoint, task, cfgs)
        for cfg, res in zip(cfgs, swept):
            solo = adapt(checkpoint, task, cfg)
            assert parameters_equal(solo.model.head.parameters(), res.model.head.parameters())
            assert solo.history == res.history
        assert swept[1].history[-1]["penalty"] > 0

    def test_sweep_rejects_mixed_configs(self, checkpoint, target):
        task = build_fewshot_task(target, 0, 1, seed=5)
        with pytest.raises(ConfigError):
            adapt_sweep(checkpoint, task, [small_adapt("ADAPTER"), small_adapt("ADAPTER", epochs=5)])
        with pytest.raises(ConfigError):
            adapt_sweep(checkpoint, task, [small_adapt("FT")])

    def test_lr_by_strategy(self):
        assert AdaptConfig(strategy="FT").lr == 1e-4 and AdaptConfig(strategy="ADAPTER").lr == 0.5


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def bench_cfg(**kw):
    base = dict(strategies=["GENERALIZATION"], shots=[1], folds=1, organs=[0], adapt=small_adapt("ADAPTER"), seed=0)
    base.update(kw)
    return BenchmarkConfig(**base)


class TestBenchmark:
    def test_single_row(self, checkpoint, target):
        res = run_benchmark(checkpoint, TaskFactory(target), bench_cfg(strategies=["ADAPTER"]))
        assert len(res.rows) == 1 and res.rows[0]["status"] == "ok"
        assert len(res.to_csv().strip().splitlines()) == 2

    def test_cell_count_and_gamma_expansion(self):
        cfg = bench_cfg(strategies=["FT", "ADAPTER", "ADAPTER_TI"], shots=[1, 5], folds=2, organs=[0, 1], gammas=[0.1, 0.2])
        assert len(cfg.cells()) == 2 * 2 * 2 * (1 + 1 + 2)

    def test_generalization_identical_across_k(self, checkpoint, target):
        res = run_benchmark(checkpoint, TaskFactory(target), bench_cfg(shots=[1, 5], organs=[0, 1]))
        by = {}
        for r in res.rows:
            by.setdefault(r["organ"], set()).add(r["dsc"])
        assert all(len(v) == 1 for v in by.values())

    def test_rerun_byte_identical_and_resume(self, checkpoint, target, tmp_path, monkeypatch):
        cfg = bench_cfg(strategies=["ADAPTER", "LINEAR_PROBE"], organs=[0, 2])
        a = run_benchmark(checkpoint, TaskFactory(target), cfg, out_dir=tmp_path / "a", config_hash="h1")
        b = run_benchmark(checkpoint, TaskFactory(target), cfg, out_dir=tmp_path / "b", config_hash="h1")
        assert a.to_csv() == b.to_csv()

        import fseft.engines.benchmark as bm

        def boom(*args, **kw):
            raise AssertionError("cached cell recomputed")

        monkeypatch.setattr(bm, "adapt", boom)
        c = run_benchmark(checkpoint, TaskFactory(target), cfg, out_dir=tmp_path / "a", config_hash="h1")
        assert c.to_csv() == a.to_csv()
        d = run_benchmark(checkpoint, TaskFactory(target), cfg, out_dir=tmp_path / "a", config_hash="h2")
        assert all(r["status"].startswith("error") for r in d.rows)

    def test_missing_checkpoint_recorded(self, target, tmp_path):
        cfg = bench_cfg(strategies=["ADAPTER", "FT"])
        res = run_benchmark(tmp_path / "nope.safetensors", TaskFactory(target), cfg)
        assert len(res.rows) == 2 and all(r["status"].startswith("error") for r in res.rows)
        assert all(np.isnan(r["dsc"]) for r in res.rows)

    def test_outputs_and_summary(self, checkpoint, target, tmp_path):
        cfg = bench_cfg(strategies=["GENERALIZATION", "LINEAR_PROBE"], organs=[0, 1, 2])
        res = run_benchmark(checkpoint, TaskFactory(target), cfg, config_hash="abc")
        doc = write_results(res, tmp_path)
        assert doc["config_hash"] == "abc" and doc["trainable_parameters"]["LINEAR_PROBE"] == 5
        rows = list(csv.DictReader(io.StringIO((tmp_path / "results.csv").read_text())))
        assert len(rows) == 6 and all(r["config_hash"] == "abc" for r in rows)
        assert "seconds" in (tmp_path / "timings.csv").read_text()
        table = summary_table(rows).splitlines()
        assert len(table) == 4
        for line in table[2:]:
            vals = [float(v) for v in line.split()[2:]]
            assert vals[-1] == pytest.approx(np.mean(vals[:-1]), abs=1e-3)
