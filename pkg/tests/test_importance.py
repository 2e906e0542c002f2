"""Importance estimation tests: hand-arithmetic oracles for the estimators,
gradient-source contracts, and the batching/labeling invariances."""

import numpy as np
import pytest

from prunelab import importance as imp
from prunelab.errors import InputError, ShapeError, StateError
from prunelab.nn import (
    INPUT,
    BatchNorm,
    Conv2d,
    Flatten,
    Linear,
    Model,
    ReLU,
    Site,
    build_cnn_small,
    build_mlp_small,
)


def loss_source(normalize=False):
    return imp.GradientSource(imp.LOSS, normalize=normalize)


def random_source(normalize=False, seed=11):
    return imp.GradientSource(imp.RANDOM, normalize=normalize, seed=seed)


@pytest.fixture(scope="module")
def small_model():
    return build_cnn_small(image_size=8, seed=5).astype(np.float64)


@pytest.fixture(scope="module")
def small_data():
    rng = np.random.default_rng(42)
    images = rng.uniform(0.0, 1.0, size=(16, 1, 8, 8))
    labels = rng.integers(0, 4, size=16)
    return images, labels


class TestGradientSource:
    def test_bad_kind_rejected(self):
        with pytest.raises(InputError, match="kind"):
            imp.GradientSource("labels")

    def test_seed_bounds(self):
        imp.GradientSource(imp.RANDOM, seed=2**64 - 1)
        with pytest.raises(InputError, match="seed"):
            imp.GradientSource(imp.RANDOM, seed=-1)
        with pytest.raises(InputError, match="seed"):
            imp.GradientSource(imp.RANDOM, seed=2**64)


class TestMakeOutputGradient:
    def test_loss_matches_cross_entropy(self):
        from prunelab.nn import softmax_cross_entropy

        logits = np.array([[0.3, -1.0, 2.0], [0.0, 0.0, 0.0]])
        labels = np.array([2, 0])
        grad = imp.make_output_gradient(loss_source(), logits, labels)
        assert np.array_equal(grad, softmax_cross_entropy(logits, labels)[1])

    def test_loss_without_labels(self):
        with pytest.raises(InputError, match="labels"):
            imp.make_output_gradient(loss_source(), np.zeros((1, 2)))

    def test_random_with_labels_rejected(self):
        with pytest.raises(InputError, match="labels"):
            imp.make_output_gradient(random_source(), np.zeros((1, 2)), labels=np.array([0]))

    def test_saturated_prediction_gives_zero_row(self):
        # softmax of [1000, 0, 0] is exactly onehot in float64
        logits = np.array([[1000.0, 0.0, 0.0]])
        grad = imp.make_output_gradient(loss_source(), logits, np.array([0]))
        assert np.array_equal(grad, np.zeros((1, 3)))

    def test_saturated_row_stays_zero_under_normalize(self):
        logits = np.array([[1000.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        grad = imp.make_output_gradient(loss_source(normalize=True), logits, np.array([0, 1]))
        assert np.array_equal(grad[0], np.zeros(3))
        assert abs(np.linalg.norm(grad[1]) - 1.0) < 1e-6

    def test_normalized_random_rows_are_unit(self):
        grad = imp.make_output_gradient(random_source(normalize=True), np.zeros((5, 4)))
        assert np.abs(np.sqrt((grad * grad).sum(axis=1)) - 1.0).max() < 1e-6

    def test_random_row_depends_only_on_seed_and_index(self):
        batched = imp.make_output_gradient(random_source(), np.zeros((4, 3)))
        single = imp.make_output_gradient(random_source(), np.zeros((1, 3)), example_indices=[2])
        assert np.array_equal(batched[2], single[0])

    def test_random_rows_differ_across_indices_and_seeds(self):
        grad = imp.make_output_gradient(random_source(seed=1), np.zeros((3, 4)))
        assert not np.array_equal(grad[0], grad[1])
        other = imp.make_output_gradient(random_source(seed=2), np.zeros((3, 4)))
        assert not np.array_equal(grad, other)

    def test_random_rows_look_standard_normal(self):
        rows = imp.make_output_gradient(random_source(seed=3), np.zeros((2000, 4)))
        assert abs(rows.mean()) < 0.05
        assert abs(rows.std() - 1.0) < 0.05

    def test_index_count_mismatch(self):
        with pytest.raises(InputError, match="indices"):
            imp.make_output_gradient(random_source(), np.zeros((2, 3)), example_indices=[0])


class TestChannelSignal:
    def test_linear_site_is_elementwise_product(self):
        s = imp.channel_signal(np.array([[2.0]]), np.array([[-3.0]]))
        assert s.item() == -6.0

    def test_conv_site_sums_spatial_positions(self):
        x = np.ones((1, 1, 2, 2))
        dx = np.array([[[[1.0, -1.0], [0.0, 2.0]]]])
        s = imp.channel_signal(x, dx)
        assert s.item() == 2.0

    def test_zero_forward_signal_means_zero(self):
        s = imp.channel_signal(np.zeros((3, 4, 2, 2)), np.random.default_rng(0).normal(size=(3, 4, 2, 2)))
        assert not s.any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="differ"):
            imp.channel_signal(np.zeros((1, 2)), np.zeros((1, 3)))


def one_channel_site(estimators):
    return imp.PrunableSite("s", 0, 1, estimators)


class TestAccumulateFinalize:
    def test_signed_abs_square_fixture(self):
        # two examples with signals 1 and -2: mean -0.5, |.| mean 1.5, sq mean 2.5
        for estimator, expected in [("taylorfo", -0.5), ("taylorfo_abs", 1.5), ("taylorfo_sq", 2.5)]:
            sites = [one_channel_site((estimator,))]
            imp.accumulate(sites, {"s": np.array([[1.0], [-2.0]])}, estimator)
            table = imp.finalize(sites, estimator, loss_source(), 2)
            assert abs(table.scores("s")[0] - expected) < 1e-12

    def test_all_zero_signals(self):
        for estimator in imp.TAYLOR_ESTIMATORS:
            sites = [one_channel_site((estimator,))]
            imp.accumulate(sites, {"s": np.zeros((4, 1))}, estimator)
            assert imp.finalize(sites, estimator, loss_source(), 4).scores("s")[0] == 0.0

    def test_mean_uses_example_count(self):
        # accumulated 6 over 4 examples: score 1.5
        sites = [one_channel_site(("taylorfo",))]
        imp.accumulate(sites, {"s": np.array([[0.0], [1.0], [2.0], [3.0]])}, "taylorfo")
        assert imp.finalize(sites, "taylorfo", loss_source(), 4).scores("s")[0] == 1.5

    def test_single_example_mean_is_identity(self):
        sites = [one_channel_site(("taylorfo",))]
        imp.accumulate(sites, {"s": np.array([[7.0]])}, "taylorfo")
        assert imp.finalize(sites, "taylorfo", loss_source(), 1).scores("s")[0] == 7.0

    def test_batch_split_matches_single_batch(self):
        rng = np.random.default_rng(9)
        signals = rng.normal(size=(8, 3))
        for estimator in imp.TAYLOR_ESTIMATORS:
            whole = [imp.PrunableSite("s", 0, 3, (estimator,))]
            split = [imp.PrunableSite("s", 0, 3, (estimator,))]
            imp.accumulate(whole, {"s": signals}, estimator)
            imp.accumulate(split, {"s": signals[:3]}, estimator)
            imp.accumulate(split, {"s": signals[3:]}, estimator)
            a = imp.finalize(whole, estimator, loss_source(), 8).scores("s")
            b = imp.finalize(split, estimator, loss_source(), 8).scores("s")
            assert np.abs(a - b).max() <= 1e-12

    def test_missing_accumulator_is_state_error(self):
        sites = [one_channel_site(("taylorfo",))]
        with pytest.raises(StateError, match="accumulator"):
            imp.accumulate(sites, {"s": np.zeros((1, 1))}, "taylorfo_sq")

    def test_non_taylor_estimator_rejected(self):
        with pytest.raises(InputError, match="accumulate"):
            imp.accumulate([one_channel_site(("molchanov_bn",))], {"s": np.zeros((1, 1))}, "molchanov_bn")

    def test_empty_finalize_is_state_error(self):
        sites = [one_channel_site(("taylorfo",))]
        with pytest.raises(StateError, match="no examples"):
            imp.finalize(sites, "taylorfo", loss_source(), 0)

    def test_positive_scaling_preserves_ranking(self):
        rng = np.random.default_rng(3)
        sites = [imp.PrunableSite("s", 0, 6, ("taylorfo",))]
        imp.accumulate(sites, {"s": rng.normal(size=(5, 6))}, "taylorfo")
        base = imp.finalize(sites, "taylorfo", loss_source(), 5).scores("s")
        sites[0].acc["taylorfo"] *= 37.5
        scaled = imp.finalize(sites, "taylorfo", loss_source(), 5).scores("s")
        assert np.array_equal(np.argsort(base), np.argsort(scaled))


class TestMolchanovScores:
    def test_bn_gate_fixture(self):
        bn = BatchNorm("bn", [INPUT], 1)
        bn.params["gamma"] = np.array([2.0])
        bn.params["beta"] = np.array([1.0])
        score = imp.molchanov_bn_score(bn, [(np.array([3.0]), np.array([-1.0]))])
        # (2*3 + 1*(-1))^2 = 25
        assert abs(score[0] - 25.0) < 1e-12

    def test_bn_zero_grads_zero_score(self):
        bn = BatchNorm("bn", [INPUT], 3)
        score = imp.molchanov_bn_score(bn, [(np.zeros(3), np.zeros(3))] * 4)
        assert np.array_equal(score, np.zeros(3))

    def test_bn_beta_zero_reduces_to_gamma_term(self):
        bn = BatchNorm("bn", [INPUT], 2)
        bn.params["gamma"] = np.array([2.0, -1.5])
        bn.params["beta"] = np.zeros(2)
        dg = np.array([0.5, 2.0])
        score = imp.molchanov_bn_score(bn, [(dg, np.array([9.0, 9.0]))])
        assert np.allclose(score, (bn.params["gamma"] * dg) ** 2, atol=1e-15)

    def test_bn_averages_over_examples(self):
        bn = BatchNorm("bn", [INPUT], 1)
        bn.params["gamma"] = np.array([1.0])
        bn.params["beta"] = np.array([0.0])
        stream = [(np.array([2.0]), np.zeros(1)), (np.array([4.0]), np.zeros(1))]
        assert imp.molchanov_bn_score(bn, stream)[0] == (4.0 + 16.0) / 2

    def test_bn_rejects_other_kinds(self):
        with pytest.raises(InputError, match="batch-norm"):
            imp.molchanov_bn_score(Linear("fc", [INPUT], 2, 2), [])

    def test_bn_empty_stream(self):
        with pytest.raises(StateError, match="empty"):
            imp.molchanov_bn_score(BatchNorm("bn", [INPUT], 1), [])

    def test_group_fixture(self):
        node = Linear("fc", [INPUT], 1, 1, bias=False)
        node.params["weight"] = np.array([[1.0, 2.0]]).reshape(1, 2)
        node.in_features = 2
        score = imp.molchanov_group_score(node, [{"weight": np.array([[3.0, -1.0]])}])
        # (1*3 + 2*(-1))^2 = 1
        assert abs(score[0] - 1.0) < 1e-12

    def test_group_zero_weights_zero_score(self):
        node = Linear("fc", [INPUT], 3, 2, bias=False)
        node.params["weight"] = np.zeros((2, 3))
        stream = [{"weight": np.random.default_rng(0).normal(size=(2, 3))}]
        assert np.array_equal(imp.molchanov_group_score(node, stream), np.zeros(2))

    def test_group_includes_bias(self):
        node = Linear("fc", [INPUT], 1, 1)
        node.params["weight"] = np.array([[2.0]])
        node.params["bias"] = np.array([3.0])
        stream = [{"weight": np.array([[1.0]]), "bias": np.array([[-1.0]]).reshape(1)}]
        # (2*1 + 3*(-1))^2 = 1
        assert abs(imp.molchanov_group_score(node, stream)[0] - 1.0) < 1e-12

    def test_group_rejects_weightless_node(self):
        with pytest.raises(InputError, match="weights"):
            imp.molchanov_group_score(ReLU("r", [INPUT]), [])

    def test_group_single_input_linear_agrees_with_taylor_sq(self):
        # with one input feature and no bias, w*dw = (w*v)*dx = x*dx exactly
        rng = np.random.default_rng(14)
        w = rng.normal(size=(4, 1))
        node = Linear("fc", [INPUT], 1, 4, bias=False)
        node.params["weight"] = w
        node.zero_grads()
        model = Model([node], (1,), 4, [Site("fc", 0, 4)], dtype=np.float64)
        v = rng.normal(size=(1, 1))
        logits, record = model.forward(v, "eval")
        g = rng.normal(size=(1, 4))
        model.zero_grads()
        site_grads = model.backward(record, g)
        group = imp.molchanov_group_score(node, [{"weight": node.grads["weight"]}])
        taylor_sq = imp.channel_signal(record.site_x["fc"], site_grads["fc"])[0] ** 2
        assert np.abs(group - taylor_sq).max() < 1e-12


def conv_bn_probe_model(channels, seed, width=4):
    """conv -> bn -> flatten -> linear with sites at BOTH the conv output and
    the bn output; the bn site exists to observe the signal after the gate."""
    rng = np.random.default_rng(seed)
    nodes = [
        Conv2d("conv", [INPUT], 1, channels, 3, padding=1, bias=False),
        BatchNorm("bn", [0], channels),
        Flatten("flat", [1]),
        Linear("fc", [2], channels * width * width, 3),
    ]
    nodes[0].params["weight"] = rng.normal(size=(channels, 1, 3, 3), scale=0.5)
    nodes[1].params["gamma"] = rng.uniform(0.5, 2.0, size=channels)
    nodes[1].params["beta"] = np.zeros(channels)
    nodes[1].state["running_mean"] = rng.normal(size=channels, scale=0.3)
    nodes[1].state["running_var"] = rng.uniform(0.5, 2.0, size=channels)
    nodes[3].params["weight"] = rng.normal(size=(3, channels * width * width), scale=0.3)
    nodes[3].params["bias"] = np.zeros(3)
    model = Model(
        nodes,
        (1, width, width),
        3,
        [Site("conv", 0, channels), Site("bn", 1, channels)],
        dtype=np.float64,
    )
    for node in model.nodes:
        node.zero_grads()
    return model


class TestEstimate:
    def test_entry_grid_and_metadata(self, small_model, small_data):
        table = imp.estimate(small_model, small_data, 8, "taylorfo", loss_source(), batch_size=4)
        assert len(table) == sum(s.channels for s in small_model.sites)
        assert [e[0] for e in table.entries[:16]] == ["conv1"] * 16
        assert table.estimator == "taylorfo"
        assert table.source == imp.LOSS
        assert table.data_size == 8
        assert np.isfinite(table.scores()).all()

    def test_d_bounds(self, small_model, small_data):
        with pytest.raises(InputError, match="d must"):
            imp.estimate(small_model, small_data, 0, "taylorfo", loss_source())
        with pytest.raises(InputError, match="d must"):
            imp.estimate(small_model, small_data, 17, "taylorfo", loss_source())

    def test_unknown_estimator(self, small_model, small_data):
        with pytest.raises(InputError, match="estimator"):
            imp.estimate(small_model, small_data, 4, "magnitude", loss_source())

    def test_loss_needs_labels(self, small_model, small_data):
        images, _ = small_data
        with pytest.raises(InputError, match="label"):
            imp.estimate(small_model, (images, None), 4, "taylorfo", loss_source())

    def test_d2_is_finite_for_all_estimators(self, small_model, small_data):
        for estimator in imp.ESTIMATORS:
            for source in (loss_source(), random_source(normalize=True)):
                table = imp.estimate(small_model, small_data, 2, estimator, source)
                assert np.isfinite(table.scores()).all(), (estimator, source.kind)

    @pytest.mark.parametrize("estimator", imp.ESTIMATORS)
    def test_partition_invariance(self, small_model, small_data, estimator):
        for source in (loss_source(), loss_source(True), random_source(), random_source(True)):
            tables = [
                imp.estimate(small_model, small_data, 11, estimator, source, batch_size=b)
                for b in (1, 3, 8)
            ]
            for other in tables[1:]:
                diff = np.abs(tables[0].scores() - other.scores()).max()
                assert diff <= 1e-12, f"{estimator}/{source.kind} diff {diff:.2e}"

    def test_random_source_never_reads_labels(self, small_model, small_data):
        images, labels = small_data
        source = random_source(normalize=True)
        with_labels = imp.estimate(small_model, (images, labels), 8, "taylorfo_sq", source)
        permuted = imp.estimate(small_model, (images, (labels + 1) % 4), 8, "taylorfo_sq", source)
        without = imp.estimate(small_model, (images, None), 8, "taylorfo_sq", source)
        assert with_labels.entries == permuted.entries == without.entries

    def test_single_example_abs_sq_rank_equivalence(self, small_model, small_data):
        src = random_source(seed=99)
        abs_t = imp.estimate(small_model, small_data, 1, "taylorfo_abs", src)
        sq_t = imp.estimate(small_model, small_data, 1, "taylorfo_sq", src)
        assert np.array_equal(np.argsort(abs_t.scores()), np.argsort(sq_t.scores()))

    def test_positivity(self, small_model, small_data):
        for estimator in ("taylorfo_abs", "taylorfo_sq", "molchanov_bn", "molchanov_group"):
            table = imp.estimate(small_model, small_data, 8, estimator, random_source())
            assert (table.scores() >= 0).all(), estimator
        signed = imp.estimate(small_model, small_data, 8, "taylorfo", random_source())
        assert (signed.scores() < 0).any()

    def test_molchanov_bn_needs_bn_follower(self, small_data):
        mlp = build_mlp_small(image_size=8, seed=0).astype(np.float64)
        with pytest.raises(InputError, match="batch norm"):
            imp.estimate(mlp, small_data, 2, "molchanov_bn", loss_source())

    def test_estimate_matches_bn_scorer(self, small_model, small_data):
        """Dual route: the streaming path must equal the standalone scorer fed
        with explicitly collected per-example gradients."""
        images, labels = small_data
        d = 5
        table = imp.estimate(small_model, small_data, d, "molchanov_bn", loss_source())
        site = small_model.sites[1]
        bn = small_model.nodes[imp.bn_node_for_site(small_model, site)]
        stream = []
        for n in range(d):
            logits, record = small_model.forward(images[n : n + 1], "eval")
            rows = imp._per_example_rows(loss_source(), logits, labels[n : n + 1], np.array([n]))
            small_model.zero_grads()
            small_model.backward(record, rows)
            stream.append((bn.grads["gamma"].copy(), bn.grads["beta"].copy()))
        oracle = imp.molchanov_bn_score(bn, stream)
        assert np.abs(table.scores(site.site_id) - oracle).max() <= 1e-15

    def test_estimate_matches_group_scorer(self, small_model, small_data):
        images, labels = small_data
        d = 5
        table = imp.estimate(small_model, small_data, d, "molchanov_group", loss_source())
        site = small_model.sites[0]
        node = small_model.nodes[site.node_index]
        stream = []
        for n in range(d):
            logits, record = small_model.forward(images[n : n + 1], "eval")
            rows = imp._per_example_rows(loss_source(), logits, labels[n : n + 1], np.array([n]))
            small_model.zero_grads()
            small_model.backward(record, rows)
            stream.append({k: v.copy() for k, v in node.grads.items()})
        oracle = imp.molchanov_group_score(node, stream)
        assert np.abs(table.scores(site.site_id) - oracle).max() <= 1e-15

    @pytest.mark.parametrize("source_kind", ["loss", "random"])
    def test_bn_equivalence_at_bn_site(self, source_kind):
        """With the site placed at the bn output, molchanov_bn equals
        taylorfo_sq: gamma*dgamma + beta*dbeta is exactly the spatial sum of
        y*dy at that output."""
        for trial in range(3):
            model = conv_bn_probe_model(channels=5, seed=100 + trial)
            rng = np.random.default_rng(200 + trial)
            images = rng.normal(size=(6, 1, 4, 4))
            labels = rng.integers(0, 3, size=6)
            src = loss_source() if source_kind == "loss" else random_source(seed=5 + trial)
            bn_table = imp.estimate(model, (images, labels if source_kind == "loss" else None), 6, "molchanov_bn", src)
            sq_table = imp.estimate(model, (images, labels if source_kind == "loss" else None), 6, "taylorfo_sq", src)
            a = bn_table.scores("bn")
            b = sq_table.scores("bn")
            rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
            assert rel.max() < 1e-6


class TestDeadNeuronZeros:
    @pytest.mark.parametrize("estimator", imp.ESTIMATORS)
    @pytest.mark.parametrize("source_kind", ["loss", "random"])
    def test_incoming_zero_scores_zero(self, small_data, estimator, source_kind):
        model = build_cnn_small(image_size=8, seed=6).astype(np.float64)
        dead = 3
        model.nodes[4].params["weight"][dead] = 0.0  # conv2 row
        model.nodes[5].params["gamma"][dead] = 0.0  # its bn gate
        model.nodes[5].params["beta"][dead] = 0.0
        src = loss_source() if source_kind == "loss" else random_source()
        table = imp.estimate(model, small_data, 6, estimator, src)
        assert table.scores("conv2")[dead] == 0.0

    @pytest.mark.parametrize("estimator", imp.ESTIMATORS)
    @pytest.mark.parametrize("source_kind", ["loss", "random"])
    def test_outgoing_zero_scores_zero(self, small_data, estimator, source_kind):
        model = build_cnn_small(image_size=8, seed=6).astype(np.float64)
        dead = 3
        model.nodes[8].params["weight"][:, dead] = 0.0  # conv3 columns reading conv2
        src = loss_source() if source_kind == "loss" else random_source()
        table = imp.estimate(model, small_data, 6, estimator, src)
        assert table.scores("conv2")[dead] == 0.0


class TestTableCsv:
    def test_round_trip(self, small_model, small_data, tmp_path):
        table = imp.estimate(small_model, small_data, 8, "taylorfo", random_source(seed=4))
        path = tmp_path / "t.csv"
        table.to_csv(path)
        loaded = imp.ImportanceTable.from_csv(path)
        assert loaded.entries == table.entries
        assert (loaded.estimator, loaded.source, loaded.normalized, loaded.data_size, loaded.seed) == (
            table.estimator,
            table.source,
            table.normalized,
            table.data_size,
            table.seed,
        )

    def test_resave_is_byte_identical(self, small_model, small_data, tmp_path):
        table = imp.estimate(small_model, small_data, 8, "taylorfo_sq", loss_source(True))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        table.to_csv(p1)
        imp.ImportanceTable.from_csv(p1).to_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("site,chan\n")
        with pytest.raises(Exception, match="header"):
            imp.ImportanceTable.from_csv(path)

    def test_empty_table_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(",".join(imp.ImportanceTable.COLUMNS) + "\n")
        with pytest.raises(Exception, match="no entries"):
            imp.ImportanceTable.from_csv(path)

    def test_mixed_metadata_rejected(self, tmp_path):
        path = tmp_path / "mixed.csv"
        path.write_text(
            ",".join(imp.ImportanceTable.COLUMNS)
            + "\n"
            + "a,0,0,1.0,taylorfo,loss,false,4,0\n"
            + "a,0,1,1.0,taylorfo_sq,loss,false,4,0\n"
        )
        with pytest.raises(Exception, match="metadata"):
            imp.ImportanceTable.from_csv(path)

    def test_non_finite_scores_rejected(self):
        with pytest.raises(StateError, match="finite"):
            imp.ImportanceTable([("s", 0, 0, float("nan"))], "taylorfo", "loss", False, 1, 0)
