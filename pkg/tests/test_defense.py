import math

import numpy as np
import pytest

from purifier import data, defense, nncore, target
from purifier.data import SplitPlan, synthesize
from purifier.defense import (
    CvaeConfig,
    PredictionIndex,
    PurifierBundle,
    build_index,
    compute_swap_rate,
    make_swap_plan,
    match_member,
    match_members,
    purify,
    reform,
    round_half_up,
    swap_label,
    train_purifier,
    train_reformer,
)
from purifier.target import ClassifierConfig, predict_confidence, train_target


@pytest.fixture(scope="module")
def small_setup():
    """A small trained target plus splits, shared across defense tests."""
    ds = synthesize(data.purchase_like_spec(n=900, k=5, d=24, seed=42,
                                            modes_per_class=6))
    splits = data.split(ds, SplitPlan(300, 300, 300, 150, 150, seed=42))
    # enough epochs to memorize d1, so member confidences are near one-hot
    cfg = ClassifierConfig(hidden_sizes=(64, 32), epochs=250, lr=3e-3, seed=42)
    model, report = train_target(cfg, splits.d1, splits.d3)
    return ds, splits, model, report


@pytest.fixture(scope="module")
def small_bundle(small_setup):
    ds, splits, model, report = small_setup
    cfg = CvaeConfig(n_classes=ds.k, encoder_hidden=(32,), decoder_hidden=(32,),
                     latent_dim=4, lam=3.0, sigma=0.15, epochs=80, seed=7)
    bundle = train_purifier(model, splits.d1, splits.d2, report.acc_train,
                            report.acc_test, cfg, tau=1e-7)
    return bundle


class TestSwapRate:
    def test_published_accuracy_pair(self):
        assert abs(compute_swap_rate(1.0, 0.8436) - 0.1564) < 1e-6

    def test_equal_accuracies_give_zero(self):
        assert compute_swap_rate(0.9, 0.9) == 0.0

    def test_higher_test_accuracy_clamps_to_zero(self):
        assert compute_swap_rate(0.8, 0.9) == 0.0

    def test_zero_train_accuracy_rejected(self):
        with pytest.raises(ValueError):
            compute_swap_rate(0.0, 0.5)

    def test_round_half_up(self):
        assert round_half_up(312.8) == 313
        assert round_half_up(312.5) == 313
        assert round_half_up(312.49) == 312


class TestSwapLabel:
    def test_example_vector(self):
        out = swap_label(np.array([0.1, 0.6, 0.3]))
        assert np.allclose(out, [0.1, 0.3, 0.6])

    def test_uniform_vector_swaps_first_two_indices(self):
        out = swap_label(np.array([0.25, 0.25, 0.25, 0.25]))
        assert np.allclose(out, [0.25, 0.25, 0.25, 0.25])

    def test_sum_preserved(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.dirichlet(np.ones(6))
            out = swap_label(p)
            assert math.isclose(out.sum(), 1.0, rel_tol=1e-12)
            assert sorted(out) == sorted(p)

    def test_argmax_becomes_former_second(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            order = np.argsort(p)[::-1]
            out = swap_label(p)
            assert np.argmax(out) == order[1]

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            swap_label(np.array([1.0]))


class TestIndexMatching:
    def _index(self, rng, m=40, k=6, tau=0.05):
        entries = rng.dirichlet(np.ones(k), size=m)
        return PredictionIndex(entries=entries, tau=tau)

    def test_stored_entry_matches_itself(self):
        rng = np.random.default_rng(2)
        index = self._index(rng)
        assert match_member(index, index.entries[3], tau=0.0)

    def test_far_query_does_not_match(self):
        index = PredictionIndex(entries=np.array([[1.0, 0.0], [0.0, 1.0]]), tau=0.01)
        assert not match_member(index, np.array([0.5, 0.5]))

    def test_empty_index_never_matches(self):
        index = PredictionIndex(entries=np.zeros((0, 4)))
        assert not match_member(index, np.full(4, 0.25))

    def test_matches_brute_force_scan(self):
        # mandatory equivalence: vectorized matcher versus a plain linear scan
        rng = np.random.default_rng(3)
        index = self._index(rng, m=60, k=5, tau=0.08)
        queries = np.vstack(
            [
                rng.dirichlet(np.ones(5), size=300),
                index.entries[rng.integers(0, 60, size=100)]
                + rng.normal(0, 0.02, size=(100, 5)),
            ]
        )
        got = match_members(index, queries)
        for q, flag in zip(queries, got):
            best = min(
                math.dist(list(q), list(entry)) for entry in index.entries
            )
            assert flag == (best <= index.tau)

    def test_dimension_mismatch(self):
        index = PredictionIndex(entries=np.array([[0.5, 0.5]]))
        with pytest.raises(nncore.DimensionMismatch):
            match_member(index, np.array([0.2, 0.3, 0.5]))


class TestBuildIndex:
    def test_zero_rate_gives_empty_index(self, small_setup):
        _, splits, model, _ = small_setup
        plan = make_swap_plan(splits.d1.n, 0.0, seed=0)
        index = build_index(model, splits.d1, plan)
        assert index.size == 0

    def test_entry_count_follows_rounding_rule(self, small_setup):
        _, splits, model, _ = small_setup
        plan = make_swap_plan(2000, 0.1564, seed=0)
        assert len(plan.indices) == 313
        plan_small = make_swap_plan(splits.d1.n, 0.2, seed=0)
        index = build_index(model, splits.d1, plan_small)
        assert index.size == round_half_up(0.2 * splits.d1.n)

    def test_entries_equal_recomputed_confidences(self, small_setup):
        _, splits, model, _ = small_setup
        plan = make_swap_plan(splits.d1.n, 0.1, seed=1)
        index = build_index(model, splits.d1, plan)
        recomputed = predict_confidence(model, splits.d1.X[plan.indices])
        assert np.array_equal(index.entries, recomputed)

    def test_positive_rate_with_empty_subset_rejected(self, small_setup):
        _, splits, model, _ = small_setup
        plan = defense.SwapPlan(p_swap=0.5, indices=np.array([], dtype=np.int64), seed=0)
        with pytest.raises(ValueError):
            build_index(model, splits.d1, plan)


class TestReformer:
    def test_condition_dim_mismatch_rejected(self, small_setup):
        _, splits, model, _ = small_setup
        cfg = CvaeConfig(n_classes=splits.d2.k + 1)
        with pytest.raises(nncore.DimensionMismatch):
            train_reformer(model, splits.d2, cfg)

    def test_autoencoder_fit_with_no_label_loss(self, small_setup):
        # over-capacity, no noise, no label loss: reconstruction must get tight
        _, splits, model, _ = small_setup
        tiny = splits.d2.subset(np.arange(40), "tiny")
        cfg = CvaeConfig(n_classes=tiny.k, encoder_hidden=(64,), decoder_hidden=(64,),
                         latent_dim=8, lam=0.0, sigma=0.0, epochs=800, lr=3e-3, seed=0)
        reformer = train_reformer(model, tiny, cfg)
        conf = predict_confidence(model, tiny.X)
        recon = reform(reformer, conf, noise_mode="zero")
        assert nncore.mse(recon, conf) < 1e-3

    def test_large_label_weight_preserves_argmax(self, small_setup):
        _, splits, model, _ = small_setup
        cfg = CvaeConfig(n_classes=splits.d2.k, encoder_hidden=(32,),
                         decoder_hidden=(32,), latent_dim=4, lam=50.0, sigma=0.1,
                         epochs=100, seed=3)
        reformer = train_reformer(model, splits.d2, cfg)
        conf = predict_confidence(model, splits.d2.X)
        out = reform(reformer, conf)
        agree = np.mean(np.argmax(out, axis=1) == np.argmax(conf, axis=1))
        assert agree >= 0.99

    def test_zero_noise_mode_deterministic(self, small_bundle, small_setup):
        _, splits, model, _ = small_setup
        conf = predict_confidence(model, splits.d3.X[:10])
        a = reform(small_bundle.reformer, conf, noise_mode="zero")
        b = reform(small_bundle.reformer, conf, noise_mode="zero")
        assert np.array_equal(a, b)

    def test_zero_sigma_sample_equals_zero_mode(self, small_setup):
        _, splits, model, _ = small_setup
        cfg = CvaeConfig(n_classes=splits.d2.k, encoder_hidden=(16,),
                         decoder_hidden=(16,), latent_dim=3, sigma=0.0, epochs=5, seed=1)
        reformer = train_reformer(model, splits.d2, cfg)
        conf = predict_confidence(model, splits.d2.X[:8])
        assert np.array_equal(
            reform(reformer, conf, "sample"), reform(reformer, conf, "zero")
        )

    def test_outputs_on_simplex(self, small_bundle, small_setup):
        _, splits, model, _ = small_setup
        conf = predict_confidence(model, splits.d3.X)
        out = reform(small_bundle.reformer, conf)
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_non_simplex_input_rejected(self, small_bundle):
        with pytest.raises(ValueError):
            reform(small_bundle.reformer, np.array([0.9, 0.9, 0.1, 0.1, 0.1]))

    def test_members_pulled_toward_reference_pattern(self, small_setup):
        # statistical pull: distance from member confidences to the held-out
        # reference centroid of their class shrinks after reforming
        _, splits, model, _ = small_setup
        half = splits.d2.n // 2
        train_half = splits.d2.subset(np.arange(half), "d2-train")
        held = splits.d2.subset(np.arange(half, splits.d2.n), "d2-held")
        cfg = CvaeConfig(n_classes=splits.d2.k, encoder_hidden=(32,),
                         decoder_hidden=(32,), latent_dim=4, lam=3.0, sigma=0.1,
                         epochs=120, seed=5)
        reformer = train_reformer(model, train_half, cfg)

        held_conf = predict_confidence(model, held.X)
        held_labels = np.argmax(held_conf, axis=1)
        member_conf = predict_confidence(model, splits.d1.X)
        member_labels = np.argmax(member_conf, axis=1)
        reformed = reform(reformer, member_conf)

        def mean_dist(conf_rows, labels):
            dists = []
            for cls in range(splits.d2.k):
                centroid = held_conf[held_labels == cls].mean(axis=0)
                rows = conf_rows[labels == cls]
                if len(rows):
                    dists.append(np.linalg.norm(rows - centroid, axis=1).mean())
            return float(np.mean(dists))

        assert mean_dist(reformed, member_labels) < mean_dist(member_conf, member_labels)


class TestPurify:
    def test_replay_identical_outputs(self, small_bundle, small_setup):
        _, splits, model, _ = small_setup
        x = splits.d1.X[small_bundle.swap_plan.indices[0]]
        first = purify(small_bundle, model, x)
        for _ in range(20):
            assert np.array_equal(purify(small_bundle, model, x), first)

    def test_swapped_member_changes_argmax(self, small_bundle, small_setup):
        _, splits, model, _ = small_setup
        swap_x = splits.d1.X[small_bundle.swap_plan.indices]
        raw = predict_confidence(model, swap_x)
        out = purify(small_bundle, model, swap_x)
        top2_gap = np.sort(out, axis=1)[:, -1] - np.sort(out, axis=1)[:, -2]
        no_tie = top2_gap > 1e-12
        changed = np.argmax(out, axis=1) != np.argmax(raw, axis=1)
        assert np.all(changed[no_tie])

    def test_swapper_disabled_is_reform_only(self, small_bundle, small_setup):
        _, splits, model, _ = small_setup
        ablated = PurifierBundle(
            reformer=small_bundle.reformer,
            index=small_bundle.index,
            swap_plan=small_bundle.swap_plan,
            swapper_enabled=False,
        )
        x = splits.d1.X[small_bundle.swap_plan.indices[:5]]
        conf = predict_confidence(model, x)
        assert np.array_equal(
            purify(ablated, model, x), reform(small_bundle.reformer, conf)
        )

    def test_outputs_always_on_simplex(self, small_bundle, small_setup):
        _, splits, model, _ = small_setup
        out = purify(small_bundle, model, splits.d3.X)
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_purify_is_function_of_raw_confidence(self, small_bundle, small_setup):
        _, splits, model, _ = small_setup
        conf = predict_confidence(model, splits.d1.X[:20])
        a = defense.purify_confidences(small_bundle, conf)
        b = defense.purify_confidences(small_bundle, conf.copy())
        assert np.array_equal(a, b)


class TestBundleSerialization:
    def test_round_trip_behavior(self, small_bundle, small_setup, tmp_path):
        _, splits, model, _ = small_setup
        defense.save_bundle(small_bundle, tmp_path / "bundle")
        loaded = defense.load_bundle(tmp_path / "bundle")
        x = splits.d3.X[:20]
        original = purify(small_bundle, model, x)
        reloaded = purify(loaded, model, x)
        # the index and weights are stored as float32, so outputs agree to
        # float32 resolution rather than bit-exactly
        assert np.allclose(original, reloaded, atol=1e-5)
        assert np.array_equal(loaded.swap_plan.indices, small_bundle.swap_plan.indices)

    def test_self_match_survives_round_trip(self, small_bundle, small_setup, tmp_path):
        _, splits, model, _ = small_setup
        defense.save_bundle(small_bundle, tmp_path / "bundle")
        loaded = defense.load_bundle(tmp_path / "bundle")
        swap_x = splits.d1.X[small_bundle.swap_plan.indices]
        conf = predict_confidence(model, swap_x)
        assert match_members(loaded.index, conf, tau=1e-6).all()
