import numpy as np
import pytest
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import tiny_config
from synthreal import evaluation as ev
from synthreal.config import ConfigError
from synthreal.toymm import Split, render_many, sample_params
from synthreal.trainer import init_state, translate


def brute_force_eer(d, same):
    """Plain-loop sweep over every midpoint threshold, interpolating at the FAR/FRR crossing."""
    d = [float(v) for v in d]
    same = [bool(v) for v in same]
    u = sorted(set(d))
    ts = [u[0] - 1] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [u[-1] + 1]
    n_pos = sum(same)
    n_neg = len(same) - n_pos
    rows = []
    for t in ts:
        fa = sum(1 for v, s in zip(d, same) if not s and v <= t) / n_neg
        fr = sum(1 for v, s in zip(d, same) if s and v > t) / n_pos
        correct = sum(1 for v, s in zip(d, same) if (v <= t) == s)
        rows.append((fa, fr, correct / len(d)))
    best = max(r[2] for r in rows)
    for (fa0, fr0, _), (fa1, fr1, _) in zip(rows, rows[1:]):
        if fa0 - fr0 == 0:
            return fa0, best
        if fa0 - fr0 < 0 < fa1 - fr1:
            w = (fr0 - fa0) / ((fa1 - fr1) - (fa0 - fr0))
            return fa0 + w * (fa1 - fa0), best
        if fa1 - fr1 == 0:
            return fa1, best
    raise AssertionError("no crossing")


class TestPairs:
    labels = np.repeat(np.arange(50), 10)

    def test_defaults(self):
        pairs = ev.build_verification_pairs(self.labels)
        assert sum(p.is_same_identity for p in pairs) == 1000
        assert sum(not p.is_same_identity for p in pairs) == 1000

    def test_labels_and_uniqueness(self):
        pairs = ev.build_verification_pairs(self.labels, 300, 300, seed=4)
        for p in pairs:
            assert p.index_a < p.index_b
            assert (self.labels[p.index_a] == self.labels[p.index_b]) == p.is_same_identity
        assert len({(p.index_a, p.index_b) for p in pairs}) == len(pairs)

    def test_deterministic(self):
        assert ev.build_verification_pairs(self.labels, seed=3) == ev.build_verification_pairs(self.labels, seed=3)
        assert ev.build_verification_pairs(self.labels, seed=3) != ev.build_verification_pairs(self.labels, seed=4)

    def test_insufficient(self):
        with pytest.raises(ev.DataError):
            ev.build_verification_pairs([0, 0, 0], 1, 1)
        with pytest.raises(ev.DataError):
            ev.build_verification_pairs([0, 0, 1, 1], 5, 1)
        with pytest.raises(ev.DataError):
            ev.build_verification_pairs([0, 0, 1, 1], 1, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 6), st.integers(0, 2 ** 31), st.data())
    def test_balanced_duplicate_free(self, ids, per_id, seed, data):
        labels = np.repeat(np.arange(ids), per_id)
        n_pos = data.draw(st.integers(1, ids * per_id * (per_id - 1) // 2))
        n_neg = data.draw(st.integers(1, (len(labels) ** 2 - ids * per_id ** 2) // 2))
        pairs = ev.build_verification_pairs(labels, n_pos, n_neg, seed)
        assert sum(p.is_same_identity for p in pairs) == n_pos
        assert len({(p.index_a, p.index_b) for p in pairs}) == n_pos + n_neg


class TestEER:
    def test_perfect_separation(self):
        assert ev.compute_eer([0.1, 0.2, 0.8, 0.9], [True, True, False, False]) == (0.0, 1.0)

    def test_hand_built_crossing_on_threshold(self):
        eer, acc = ev.compute_eer([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [1, 1, 0, 1, 0, 0])
        assert eer == pytest.approx(1 / 3, abs=1e-15)
        assert acc == pytest.approx(5 / 6, abs=1e-15)

    def test_hand_built_interpolated(self):
        # FAR/FRR go (0.25, 0.5) -> (0.25, 0.0) between thresholds 0.25 and 0.35
        eer, acc = ev.compute_eer([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [1, 0, 1, 0, 0, 0])
        assert eer == pytest.approx(0.25, abs=1e-15)
        assert acc == pytest.approx(5 / 6, abs=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=12))
    def test_matches_brute_force(self, items):
        d = [v / 7 for v, _ in items]
        same = [s for _, s in items]
        if all(same) or not any(same):
            return
        eer, acc = ev.compute_eer(d, same)
        ref_eer, ref_acc = brute_force_eer(d, same)
        assert eer == pytest.approx(ref_eer, abs=1e-12)
        assert acc == pytest.approx(ref_acc, abs=1e-12)

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(0)
        eer, _ = ev.compute_eer(rng.random(10000), rng.random(10000) < 0.5)
        assert abs(eer - 0.5) <= 0.05

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=4, max_size=30), st.integers(0, 2 ** 31))
    def test_monotone_invariance(self, grid, seed):
        # grid-valued so that the transform stays strictly monotone in floating point
        d = [v / 25 for v in grid]
        same = np.random.default_rng(seed).random(len(d)) < 0.5
        if same.all() or not same.any():
            return
        a = ev.compute_eer(np.array(d), same)
        b = ev.compute_eer(np.exp(3 * np.array(d)) + 5, same)
        assert a[0] == pytest.approx(b[0], abs=1e-12) and a[1] == pytest.approx(b[1], abs=1e-12)

    def test_single_class(self):
        with pytest.raises(ev.DataError):
            ev.compute_eer([0.1, 0.2], [True, True])


class TestHistogram:
    def test_counts_and_brute_force(self, tiny_bundle, tiny_embedder):
        held = tiny_bundle.heldout
        pairs = ev.build_verification_pairs(held.labels, 20, 30, seed=1)
        hist = ev.distance_histogram(held.images, pairs, tiny_embedder, bins=10)
        assert hist.pos_counts.sum() == 20 and hist.neg_counts.sum() == 30
        from synthreal.trainer import embed_images

        e = embed_images(tiny_embedder.to_module(), held.images).astype(np.float64)
        pos, neg = np.zeros(10, int), np.zeros(10, int)
        for p in pairs:
            dist = np.sqrt(((e[p.index_a] - e[p.index_b]) ** 2).sum())
            b = min(int(dist / 0.2), 9)
            (pos if p.is_same_identity else neg)[b] += 1
        assert np.array_equal(hist.pos_counts, pos) and np.array_equal(hist.neg_counts, neg)

    def test_identical_images_lowest_bin(self, tiny_bundle, tiny_embedder):
        images = np.repeat(tiny_bundle.heldout.images[:1], 8, axis=0)
        labels = np.repeat([0, 1], 4)
        pairs = ev.build_verification_pairs(labels, 5, 5)
        hist = ev.distance_histogram(images, pairs, tiny_embedder, bins=5)
        assert hist.pos_counts[0] == 5

    def test_zero_bins(self, tiny_bundle, tiny_embedder):
        pairs = ev.build_verification_pairs(tiny_bundle.heldout.labels, 2, 2)
        with pytest.raises(ValueError):
            ev.distance_histogram(tiny_bundle.heldout.images, pairs, tiny_embedder, bins=0)

    def test_csv(self):
        hist = ev.histogram_of([0.0, 1.0, 2.0], [True, False, False], bins=2)
        assert hist.to_csv().splitlines() == [
            "bin_left,bin_right,pos_count,neg_count", "0.000000,1.000000,1,0", "1.000000,2.000000,0,2"]


class TestFidelity:
    def test_oracle_generator_is_zero(self, tiny_bundle):
        held = tiny_bundle.heldout
        stub = Split(held.targets, held.labels, targets=held.targets)
        assert ev.oracle_fidelity(nn.Identity(), stub) == 0.0

    def test_batch_partition_invariant_and_nonnegative(self, tiny_cfg, tiny_bundle, tiny_embedder):
        G = init_state(tiny_cfg, tiny_embedder).nets["G"]
        a = ev.oracle_fidelity(G, tiny_bundle.heldout, batch=3)
        b = ev.oracle_fidelity(G, tiny_bundle.heldout, batch=256)
        assert a >= 0 and a == pytest.approx(b, abs=1e-12)

    def test_missing_targets(self, tiny_bundle):
        with pytest.raises(ev.DataError):
            ev.oracle_fidelity(nn.Identity(), Split(tiny_bundle.heldout.images, tiny_bundle.heldout.labels))

    def test_report_range(self):
        with pytest.raises(ValueError):
            ev.EvalReport(accuracy=1.2, one_minus_eer=0.5, fidelity=0.1)


class TestAblation:
    def test_rows_and_shared_data(self, tiny_cfg, tiny_bundle, tiny_embedder):
        rows = ev.run_ablation(tiny_cfg, tiny_bundle, tiny_embedder, n_pos=10, n_neg=10)
        assert [r.name for r in rows] == ["Ours", "Ours without L_C", "Ours without L_DP", "Ours without L_cyc"]
        assert len({r.data_fingerprint for r in rows}) == 1
        assert len({r.config_fingerprint for r in rows}) == 4
        assert all(r.report is not None and r.error is None for r in rows)
        assert "Ours without L_DP" in ev.format_table(rows)

    def test_failures_recorded(self, tiny_cfg, tiny_bundle, tiny_embedder, monkeypatch):
        real_train = ev.train

        def flaky(cfg, *a, **kw):
            if cfg.loss.lambda_cyc == 0:
                raise FloatingPointError("boom")
            return real_train(cfg, *a, **kw)

        monkeypatch.setattr(ev, "train", flaky)
        rows = ev.run_ablation(tiny_cfg, tiny_bundle, tiny_embedder, n_pos=10, n_neg=10)
        assert rows[-1].report is None and "boom" in rows[-1].error
        assert all(r.report is not None for r in rows[:-1])


class TestAugmentation:
    def _inputs(self, bundle):
        real = (bundle.unpaired_real.images, bundle.unpaired_real.labels)
        gen = (bundle.unpaired_synthetic.images, bundle.unpaired_synthetic.labels)
        test = (bundle.heldout.targets, bundle.heldout.labels)
        return gen, real, test

    def test_six_cells_deterministic(self, tiny_cfg, tiny_bundle):
        aug = ev.AugmentConfig(iters=3, batch_size=4, n_pos=10, n_neg=10)
        run = lambda: ev.augmentation_experiment((0.2, 0.5, 1.0), *self._inputs(tiny_bundle), tiny_cfg, aug, seed=1)
        cells = run()
        assert [(c.fraction, c.augmented) for c in cells] == [
            (f, a) for f in (0.2, 0.5, 1.0) for a in (False, True)]
        assert cells == run()

    def test_empty_cell(self, tiny_cfg, tiny_bundle):
        gen, real, test = self._inputs(tiny_bundle)
        with pytest.raises(ConfigError):
            ev.augmentation_experiment((), gen, real, test, tiny_cfg)
        with pytest.raises(ConfigError):
            ev.augmentation_experiment((0.5,), (gen[0][:0], gen[1][:0]), real, test, tiny_cfg)

    def test_subsample(self):
        labels = np.repeat(np.arange(4), 10)
        idx = ev.subsample_per_identity(labels, 0.2, 0)
        assert np.array_equal(np.bincount(labels[idx]), [2, 2, 2, 2])
        with pytest.raises(ConfigError):
            ev.subsample_per_identity(labels, 0.0, 0)


class TestGrids:
    def test_tiling(self, tmp_path):
        images = np.random.default_rng(0).random((6, 32, 32, 3))
        grid = ev.emit_grid(images, 2, 3, tmp_path / "g.png")
        assert grid.shape == (64, 96, 3)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "g.png")), grid)
        assert np.array_equal(grid[32:64, 64:96], np.round(images[5] * 255).astype(np.uint8))

    def test_layout_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            ev.emit_grid(np.zeros((5, 8, 8, 3)), 2, 3, tmp_path / "g.png")

    def test_interpolation(self, tmp_path, tiny_cfg, tiny_embedder):
        a, b = sample_params(0, 2, 1)
        G = init_state(tiny_cfg, tiny_embedder).nets["G"]
        grid, params = ev.emit_interpolation_grid(a, b, 3, [-0.5, 0.5], G, tmp_path / "i.png", size=16)
        assert grid.shape == (32, 48, 3)
        start = a.replace(pose=(-0.5, a.pose[1]))
        assert params[0] == start
        expected = translate(G, render_many([start], 16))[0]
        want = np.round(np.clip(expected, 0, 1) * 255)
        assert np.abs(grid[:16, :16].astype(float) - want).max() <= 1
        mid = np.asarray(params[1].identity_coeffs)
        assert np.allclose(mid, (np.asarray(a.identity_coeffs) + np.asarray(b.identity_coeffs)) / 2, atol=1e-15)

    def test_illumination_strip(self, tmp_path):
        (p,) = sample_params(0, 1, 1)
        strip = ev.emit_illumination_strip(p, [0.0, 0.5, 1.0], None, tmp_path / "l.png", size=16)
        assert strip.shape == (16, 48, 3)
