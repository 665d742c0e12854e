import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import softmax

from timepillars.dataio import Scan, SceneConfig, Sequence, generate_scene
from timepillars.evaluation import decode_detections
from timepillars.geometry import IDENTITY_2D, GridMeta, RotatedBox, Transform2D, wrap_angle
from timepillars.network import AuxHead, AuxPair, Compensation, HeadOutput, build_model
from timepillars.numerics import ParamStore, grad_check, no_grad
from timepillars.pillars import GridSpec
from timepillars.training import (
    AdamW,
    CheckpointError,
    LossConfig,
    Trainer,
    adamw_step,
    aux_loss,
    bias_init,
    build_targets,
    class_weights_from_frequencies,
    compute_losses,
    cosine_lr,
    draw_warmup_count,
    focal_loss,
    focal_loss_grad,
    huber_loss,
    huber_loss_grad,
    load_checkpoint,
    save_checkpoint,
    targets_as_head,
    train_step,
    transfer_weights,
)

GRID = GridSpec(x_min=0.0, x_max=16.0, y_min=-8.0, y_max=8.0, cell=0.5)


def one_hot(labels, k=4):
    return np.eye(k)[labels]


def random_probs(rng, shape):
    return softmax(rng.standard_normal(shape), axis=-1)


class TestFocalLoss:
    def test_half_probability_example(self):
        probs = np.array([[[0.5, 0.5, 0.0, 0.0]]])
        targets = one_hot(np.array([[1]]))
        loss = focal_loss(probs, targets, np.ones((1, 1), dtype=bool), alpha=0.5, gamma=2.0)
        assert loss == pytest.approx(0.5 * 0.25 * math.log(2), rel=1e-6)
        assert loss == pytest.approx(0.08664, abs=1e-5)

    def test_reduces_to_cross_entropy(self, rng):
        probs = random_probs(rng, (6, 5, 4))
        labels = rng.integers(0, 4, (6, 5))
        targets = one_hot(labels)
        mask = np.ones((6, 5), dtype=bool)
        p_t = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
        expected = -np.log(p_t).mean()
        assert focal_loss(probs, targets, mask, alpha=1.0, gamma=0.0) == pytest.approx(expected, abs=1e-12)

    def test_confident_cell_contributes_nothing(self):
        probs = np.array([[[0.0, 1.0, 0.0, 0.0]]])
        loss = focal_loss(probs, one_hot(np.array([[1]])), np.ones((1, 1), dtype=bool))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_masked_cells_do_not_count(self, rng):
        probs = random_probs(rng, (4, 4, 4))
        targets = one_hot(rng.integers(0, 4, (4, 4)))
        mask = rng.random((4, 4)) < 0.5
        before = focal_loss(probs, targets, mask)
        perturbed = probs.copy()
        perturbed[~mask] = random_probs(rng, (int((~mask).sum()), 4))
        assert focal_loss(perturbed, targets, mask) == before
        assert not focal_loss_grad(probs, targets, mask)[~mask].any()

    def test_empty_mask(self, rng):
        probs = random_probs(rng, (2, 2, 4))
        assert focal_loss(probs, one_hot(np.zeros((2, 2), dtype=int)), np.zeros((2, 2), dtype=bool)) == 0.0

    def test_gradient_matches_finite_differences(self, rng):
        probs = np.clip(random_probs(rng, (3, 3, 4)), 0.05, 0.95)
        targets = one_hot(rng.integers(0, 4, (3, 3)))
        mask = np.ones((3, 3), dtype=bool)
        mask[0, 0] = False
        weights = [0.5, 2.0, 1.0, 3.0]

        analytic = focal_loss_grad(probs, targets, mask, 0.5, 2.0, weights)
        numeric = np.zeros_like(probs)
        eps = 1e-6
        for idx in np.ndindex(probs.shape):
            plus, minus = probs.copy(), probs.copy()
            plus[idx] += eps
            minus[idx] -= eps
            numeric[idx] = (focal_loss(plus, targets, mask, 0.5, 2.0, weights)
                            - focal_loss(minus, targets, mask, 0.5, 2.0, weights)) / (2 * eps)
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)


class TestHuberLoss:
    @pytest.mark.parametrize("error, delta, expected", [(0.5, 1.0, 0.125), (2.0, 1.0, 1.5), (3.0, 3.0, 4.5)])
    def test_examples(self, error, delta, expected):
        loss = huber_loss(np.array([error]), np.array([0.0]), np.array([True]), delta)
        assert loss == pytest.approx(expected)

    def test_branches_agree_at_delta(self):
        delta = 3.0
        below = huber_loss(np.array([delta - 1e-9]), np.zeros(1), np.ones(1, dtype=bool), delta)
        above = huber_loss(np.array([delta + 1e-9]), np.zeros(1), np.ones(1, dtype=bool), delta)
        assert below == pytest.approx(above, abs=1e-8)

    def test_cell_mask_broadcasts(self, rng):
        pred = rng.standard_normal((4, 4, 3))
        target = rng.standard_normal((4, 4, 3))
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 2] = True
        expected = huber_loss(pred[1, 2], target[1, 2], np.ones(3, dtype=bool), 1.0)
        assert huber_loss(pred, target, mask, 1.0) == pytest.approx(expected)

    def test_nan_targets_outside_mask_ignored(self, rng):
        pred = rng.standard_normal((3, 3, 2))
        target = np.full((3, 3, 2), np.nan)
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 0] = True
        target[0, 0] = [0.0, 0.0]
        assert math.isfinite(huber_loss(pred, target, mask, 1.0))
        assert np.all(np.isfinite(huber_loss_grad(pred, target, mask, 1.0)))

    def test_delta_must_be_positive(self):
        with pytest.raises(ValueError, match="Huber delta must be positive"):
            huber_loss(np.zeros(1), np.zeros(1), np.ones(1, dtype=bool), 0.0)

    def test_gradient(self, rng):
        pred = rng.uniform(-4, 4, (5, 3))
        target = rng.uniform(-4, 4, (5, 3))
        mask = rng.random((5, 3)) < 0.7
        analytic = huber_loss_grad(pred, target, mask, 1.0)
        numeric = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            plus, minus = pred.copy(), pred.copy()
            plus[idx] += 1e-6
            minus[idx] -= 1e-6
            numeric[idx] = (huber_loss(plus, target, mask, 1.0) - huber_loss(minus, target, mask, 1.0)) / 2e-6
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)


class TestAuxLoss:
    META = GridMeta(0.0, -10.0, 0.5)

    def test_identity_transform(self, rng):
        h_prev = rng.standard_normal((10, 8, 3))
        assert aux_loss(h_prev.copy(), h_prev, IDENTITY_2D, self.META) == 0.0

    def test_matches_huber_of_difference(self, rng):
        h_prev = rng.standard_normal((10, 8, 2))
        aux_out = rng.standard_normal((10, 8, 2))
        shift = Transform2D(1, 0, 0, 1, 3 * self.META.cell, 0.0)
        target = np.zeros_like(h_prev)
        target[3:] = h_prev[:-3]
        everywhere = np.ones(aux_out.shape, dtype=bool)
        expected = huber_loss(aux_out - target, np.zeros_like(target), everywhere, 1.0)
        assert aux_loss(aux_out, h_prev, shift, self.META) == pytest.approx(expected, rel=1e-12)
        assert aux_loss(target, h_prev, shift, self.META) == 0.0

    def test_decreases_when_trained(self, float64, rng):
        store = ParamStore()
        comp = Compensation(store, "comp", 3, rng=np.random.default_rng(3))
        aux = AuxHead(store, "aux", 3, rng=np.random.default_rng(4))
        optimizer = AdamW(store, lr=0.01, weight_decay=0.0)
        h = rng.standard_normal((1, 6, 6, 3))
        shift = Transform2D(1, 0, 0, 1, 2 * self.META.cell, 0.0)
        losses = []
        for _ in range(100):
            out = aux.forward(comp.forward(h, shift))
            loss, grad = aux_loss(out[0], h[0], shift, self.META, with_grad=True)
            store.zero_grad()
            comp.backward(aux.backward(grad[None]))
            optimizer.step()
            losses.append(loss)
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_compensation_learns_identity(self, float64):
        store = ParamStore()
        comp = Compensation(store, "comp", 3, rng=np.random.default_rng(5))
        optimizer = AdamW(store, lr=0.03, weight_decay=0.0)
        train_rng, held_out_rng = np.random.default_rng(6), np.random.default_rng(7)
        steps = 500
        for step in range(steps):
            h = train_rng.standard_normal((1, 8, 8, 3))
            out = comp.forward(h, IDENTITY_2D)
            _, grad = aux_loss(out[0], h[0], IDENTITY_2D, self.META, with_grad=True)
            store.zero_grad()
            comp.backward(grad[None])
            optimizer.step(cosine_lr(0.03, step, steps))

        with no_grad():
            for _ in range(5):
                h = held_out_rng.standard_normal((1, 8, 8, 3))
                out = comp.forward(h, IDENTITY_2D)
                assert np.linalg.norm(out - h) / np.linalg.norm(h) < 0.1


class TestTargets:
    def test_box_at_cell_center(self):
        box = RotatedBox(3.0 + 0.5, -2.0 + 0.5, 0.2, 4.0, 1.8, 1.5, 0.3, "vehicle")
        targets = build_targets([box], GRID)
        assert targets.foreground.sum() == 1
        i, j = np.argwhere(targets.foreground)[0]
        assert (i, j) == (3, 6)
        np.testing.assert_allclose(targets.reg[i, j, :2], 0.0, atol=1e-12)
        np.testing.assert_allclose(targets.reg[i, j, 6:], [math.sin(0.3), math.cos(0.3)])
        np.testing.assert_array_equal(targets.cls[i, j], [0, 1, 0, 0])

    def test_empty_annotations(self):
        targets = build_targets([], GRID)
        assert not targets.foreground.any()
        assert not targets.unclear.any()
        assert np.all(targets.cls[..., 0] == 1)
        assert np.isnan(targets.reg).all()

    def test_unclear_and_outside(self):
        boxes = [
            RotatedBox(5.2, 0.3, 0, 1, 1, 1, 0, "unclear"),
            RotatedBox(30.0, 0.0, 0, 4, 2, 1.5, 0, "vehicle"),
        ]
        targets = build_targets(boxes, GRID)
        assert targets.unclear.sum() == 1
        assert not targets.foreground.any()
        assert targets.n_ignored == 1
        assert targets.n_valid == targets.unclear.size - 1

    def test_nearest_box_wins_cell(self):
        near = RotatedBox(5.1, 0.1, 0, 0.6, 0.6, 1.7, 0, "pedestrian")
        far = RotatedBox(5.9, 0.9, 0, 4, 2, 1.5, 0, "vehicle")
        targets = build_targets([far, near], GRID)
        assert targets.foreground.sum() == 1
        assert targets.cls[5, 8, 3] == 1

    def test_masks_disjoint_and_reg_only_on_foreground(self):
        seq = generate_scene(SceneConfig(seed=4))
        targets = build_targets(seq.annotations, GridSpec())
        assert not (targets.foreground & targets.unclear).any()
        assert np.isfinite(targets.reg[targets.foreground]).all()
        assert np.isnan(targets.reg[~targets.foreground]).all()

    def test_decode_round_trip(self, rng):
        rows, cols = GRID.output_shape
        cells = rng.choice(rows * cols, size=12, replace=False)
        boxes = []
        for n, cell in enumerate(cells):
            i, j = divmod(int(cell), cols)
            boxes.append(RotatedBox(
                GRID.x_min + i + rng.uniform(0.05, 0.95),
                GRID.y_min + j + rng.uniform(0.05, 0.95),
                rng.uniform(-1, 1), rng.uniform(0.5, 1.0), rng.uniform(0.3, 0.9), rng.uniform(1, 2),
                rng.uniform(-3.0, 3.0), ("vehicle", "cyclist", "pedestrian")[n % 3],
            ))
        decoded = decode_detections(targets_as_head(build_targets(boxes, GRID)), GRID,
                                    score_threshold=0.5, nms_iou=1.0)
        assert len(decoded) == len(boxes)

        def key(b):
            return (round(b.cx, 6), round(b.cy, 6))

        for got, want in zip(sorted(decoded, key=key), sorted(boxes, key=key)):
            assert got.label == want.label
            assert got.score == 1.0
            np.testing.assert_allclose([got.cx, got.cy, got.cz, got.l, got.w, got.h, got.yaw],
                                       [want.cx, want.cy, want.cz, want.l, want.w, want.h, want.yaw], atol=1e-6)

    def test_decode_round_trip_on_generated_scenes(self, tiny_config):
        counts = dict(tiny_config.scene.object_counts, unclear=1)
        for seed in range(100):
            scene = generate_scene(replace(tiny_config.scene, seed=seed, object_counts=counts))
            targets = build_targets(scene.annotations, GRID)
            decoded = decode_detections(targets_as_head(targets), GRID, score_threshold=0.5, nms_iou=1.0)
            assert len(decoded) == targets.foreground.sum()
            for got in decoded:
                want = min(scene.annotations, key=lambda b: math.hypot(b.cx - got.cx, b.cy - got.cy))
                assert got.label == want.label and got.score == 1.0
                np.testing.assert_allclose([got.cx, got.cy, got.cz, got.l, got.w, got.h],
                                           [want.cx, want.cy, want.cz, want.l, want.w, want.h], atol=1e-6)
                assert abs(wrap_angle(got.yaw - want.yaw)) < 1e-6


class TestBiasInit:
    def test_example_frequencies(self):
        freqs = np.array([0.94, 0.03, 0.02, 0.01])
        np.testing.assert_allclose(softmax(bias_init(freqs)), freqs, atol=1e-6)

    def test_uniform(self):
        bias = bias_init(np.full(4, 0.25))
        np.testing.assert_allclose(bias, bias[0])

    def test_random_draws(self, rng):
        for _ in range(100):
            freqs = rng.dirichlet(np.ones(4))
            freqs = np.maximum(freqs, 1e-3)
            freqs /= freqs.sum()
            np.testing.assert_allclose(softmax(bias_init(freqs)), freqs, atol=1e-6)

    def test_zero_frequency_clamped(self):
        bias = bias_init([1.0, 0.0, 0.0, 0.0])
        assert np.all(np.isfinite(bias))
        probs = softmax(bias)
        assert probs[1] == pytest.approx(1e-6, rel=1e-3)

    def test_head_starts_at_frequencies(self, tiny_config, rng):
        model = build_model(tiny_config)
        freqs = np.array([0.94, 0.03, 0.02, 0.01])
        model.head.cls_kernel.value[...] = 0
        model.head.cls_bias.value[...] = bias_init(freqs)
        features = rng.standard_normal((1, 6, 5, model.backbone.out_channels)).astype(np.float32)
        out = model.head.forward(features)
        np.testing.assert_allclose(out.cls, np.broadcast_to(freqs, out.cls.shape), atol=1e-6)

    def test_class_weights_mean_one(self):
        weights = class_weights_from_frequencies([0.94, 0.03, 0.02, 0.01])
        assert weights.mean() == pytest.approx(1.0)
        assert list(np.argsort(weights)) == [0, 1, 2, 3]


class TestCompositeLoss:
    def test_gradient_matches_finite_differences(self, rng):
        boxes = [RotatedBox(3.3, -1.4, 0.1, 4.0, 1.8, 1.5, 0.4, "vehicle"),
                 RotatedBox(9.6, 4.2, 0.0, 0.6, 0.6, 1.7, -1.0, "pedestrian")]
        targets = build_targets(boxes, GRID)
        rows, cols = GRID.output_shape
        arrays = {
            "cls": np.clip(random_probs(rng, (rows, cols, 4)), 0.05, 0.95),
            "loc": rng.uniform(-1, 1, (rows, cols, 3)),
            "size": rng.uniform(0, 5, (rows, cols, 3)),
            "heading": rng.uniform(-1, 1, (rows, cols, 2)),
            "aux_out": rng.standard_normal((4, 4, 2)),
        }
        meta = GridMeta(0.0, -2.0, 1.0)
        aux = (arrays["aux_out"], rng.standard_normal((4, 4, 2)), Transform2D(1, 0, 0, 1, 1.0, 0.0), meta)
        config = LossConfig()

        def forward():
            head = HeadOutput(arrays["cls"], arrays["loc"], arrays["size"], arrays["heading"])
            losses, _, _ = compute_losses(head, targets, aux, config,
                                          class_weights=[0.5, 1.0, 2.0, 2.0])
            return np.array(losses["total"])

        def backward(dout):
            head = HeadOutput(arrays["cls"], arrays["loc"], arrays["size"], arrays["heading"])
            _, grads, aux_grad = compute_losses(head, targets, aux, config,
                                                class_weights=[0.5, 1.0, 2.0, 2.0])
            out = {k: v * dout for k, v in grads.items()}
            out["aux_out"] = aux_grad * dout
            return out

        assert grad_check(forward, backward, arrays, samples=40) <= 1e-3

    def test_aux_term_is_weighted_aux_loss(self, rng):
        targets = build_targets([], GRID)
        pair = AuxPair(rng.standard_normal((4, 4, 2)), rng.standard_normal((4, 4, 2)),
                       Transform2D(1, 0, 0, 1, 1.0, 0.0), GridMeta(0.0, -2.0, 1.0))
        loss, grad = aux_loss(*pair, delta=0.5, with_grad=True)
        config = LossConfig(lambda_aux=0.25, delta_aux=0.5)
        losses, _, aux_grad = compute_losses(targets_as_head(targets), targets, pair, config)
        assert losses["aux"] == pytest.approx(loss, rel=1e-12)
        np.testing.assert_allclose(aux_grad, 0.25 * grad, rtol=1e-12)
        assert losses["total"] == pytest.approx(losses["focal"] + 0.25 * loss, rel=1e-12)

    def test_no_aux_pair(self, rng):
        targets = build_targets([], GRID)
        head = targets_as_head(targets)
        losses, _, aux_grad = compute_losses(head, targets, None, LossConfig())
        assert losses["aux"] == 0.0 and aux_grad is None
        assert losses["loc"] == 0.0 and losses["ang"] == 0.0


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        w = np.array([1.0, -2.0])
        m, v = np.zeros(2), np.zeros(2)
        for step in range(1, 6):
            adamw_step(w, np.zeros(2), m, v, step, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(w, [1.0, -2.0])

    def test_decoupled_decay(self):
        w = np.array([1.0, -2.0])
        m, v = np.zeros(2), np.zeros(2)
        for step in range(1, 6):
            adamw_step(w, np.zeros(2), m, v, step, lr=0.1, weight_decay=0.01)
        np.testing.assert_allclose(w, np.array([1.0, -2.0]) * (1 - 0.001) ** 5, rtol=1e-12)

    def test_quadratic_bowl(self):
        w = np.array([1.0])
        m, v = np.zeros(1), np.zeros(1)
        for step in range(1, 201):
            adamw_step(w, 2 * w, m, v, step, lr=0.05, weight_decay=0.0)
        assert abs(w[0]) < 0.1

    def test_frozen_and_gradless_parameters_untouched(self):
        store = ParamStore()
        moving = store.add("a", np.ones(3))
        frozen = store.add("b", np.ones(3), trainable=False)
        idle = store.add("c", np.ones(3))
        moving.grad = np.ones(3)
        frozen.grad = np.ones(3)
        opt = AdamW(store, lr=0.1)
        opt.step()
        assert np.all(moving.value < 1)
        np.testing.assert_array_equal(frozen.value, 1.0)
        np.testing.assert_array_equal(idle.value, 1.0)
        assert sorted(opt.state_tensors()) == ["adamw.m.a", "adamw.v.a"]
        assert opt.step_count == 1


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 100) == pytest.approx(1.0)
    assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5)
    assert cosine_lr(1.0, 100, 100) == pytest.approx(0.0)
    assert cosine_lr(1.0, 150, 100) == pytest.approx(0.0)
    assert cosine_lr(1.0, 10, 0) == 1.0


class TestWarmupCount:
    def test_range_clipped_to_available(self, rng):
        config = LossConfig(k_min=1, k_max=9)
        draws = {draw_warmup_count(rng, config, 3) for _ in range(200)}
        assert draws == {1, 2, 3}
        assert draw_warmup_count(rng, config, 0) == 0

    def test_full_range(self, rng):
        draws = {draw_warmup_count(rng, LossConfig(), 10) for _ in range(1000)}
        assert draws == set(range(1, 10))

    def test_bad_range(self):
        with pytest.raises(ValueError, match="k_min"):
            LossConfig(k_min=5, k_max=2)


def all_unclear_sequence(grid, points):
    rows, cols = grid.output_shape
    cell = 2 * grid.cell
    boxes = [RotatedBox(grid.x_min + (i + 0.5) * cell, grid.y_min + (j + 0.5) * cell, 0.0, 0.8, 0.8, 1.5, 0.0,
                        "unclear") for i in range(rows) for j in range(cols)]
    return Sequence([Scan(points, np.eye(4), 0.0)], boxes, "all_unclear")


class TestTrainStep:
    @pytest.fixture
    def sequences(self, tiny_config):
        return [generate_scene(replace(tiny_config.scene, seed=s)) for s in range(2)]

    def test_single_frame_when_no_warmup(self, make_config, sequences):
        config = make_config(loss={"k_min": 0, "k_max": 0})
        model = build_model(config)
        opt = AdamW(model.store)
        losses = train_step(model, sequences[0], opt, config.loss, np.random.default_rng(0))
        assert losses["k"] == 0
        assert losses["aux"] == 0.0
        assert math.isfinite(losses["total"])
        assert opt.step_count == 1

    def test_warmup_runs_aux(self, tiny_config, sequences):
        model = build_model(tiny_config)
        losses = train_step(model, sequences[0], AdamW(model.store), tiny_config.loss, np.random.default_rng(0))
        assert 1 <= losses["k"] <= 2
        assert losses["aux"] >= 0.0
        assert not model._tape

    def test_degenerate_batch_skipped(self, tiny_config, sequences):
        model = build_model(tiny_config)
        bad = all_unclear_sequence(model.grid, sequences[0].core.points)
        assert train_step(model, bad, AdamW(model.store), tiny_config.loss, np.random.default_rng(0)) is None
        trainer = Trainer(model, tiny_config.loss, tiny_config.train)
        assert trainer.fit([bad]) == []
        assert trainer.skipped == 1 and trainer.step == 0

    def test_runs_without_aux_weight(self, make_config, sequences):
        config = make_config(loss={"lambda_aux": 0.0}, model={"aux_task": False})
        model = build_model(config)
        losses = train_step(model, sequences[0], AdamW(model.store), config.loss, np.random.default_rng(0))
        assert math.isfinite(losses["total"])

    def test_identical_seeds_identical_trajectories(self, tiny_config, sequences):
        histories = []
        for _ in range(2):
            trainer = Trainer(build_model(tiny_config), tiny_config.loss, tiny_config.train)
            trainer.prepare(sequences)
            histories.append(trainer.fit(sequences, epochs=2))
        assert histories[0] == histories[1]
        assert len(histories[0]) == 4

    def test_prepare_sets_classifier_bias(self, tiny_config, sequences):
        trainer = Trainer(build_model(tiny_config), tiny_config.loss, tiny_config.train)
        freqs = trainer.prepare(sequences)
        assert freqs.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(softmax(trainer.model.head.cls_bias.value.astype(np.float64)), freqs, atol=1e-5)
        assert trainer.class_weights.mean() == pytest.approx(1.0)

    def test_bptt_rejected_with_interpolation(self, make_config):
        config = make_config(model={"compensation": "interpolation"}, train={"bptt": True})
        with pytest.raises(ValueError, match="bptt"):
            Trainer(build_model(config), config.loss, config.train)

    @pytest.mark.slow
    def test_loss_decreases_on_fixed_sequence(self, make_config, sequences):
        config = make_config(model={"kind": "pointpillars"}, train={"cosine": False})
        trainer = Trainer(build_model(config), config.loss, config.train)
        trainer.prepare(sequences[:1])
        history = trainer.fit(sequences[:1], epochs=500)
        totals = [h["total"] for h in history]
        assert np.mean(totals[-10:]) <= 0.5 * totals[10]


class TestCheckpointsAndTransfer:
    @pytest.fixture
    def sequence(self, tiny_config):
        return generate_scene(tiny_config.scene)

    @pytest.fixture
    def single_frame_checkpoint(self, make_config, tmp_path):
        model = build_model(make_config(model={"kind": "pointpillars"}), seed=5)
        save_checkpoint(tmp_path / "single", model)
        return tmp_path / "single", model

    def test_transfer_key_sets(self, tiny_config, single_frame_checkpoint):
        path, single = single_frame_checkpoint
        model = build_model(tiny_config)
        fresh_model = build_model(tiny_config)
        report = transfer_weights(model, path)

        assert set(report["fresh"]) == set(model.store.names()) - set(single.store.names())
        assert any(name.startswith("gru.") for name in report["fresh"])
        for name in report["fresh"]:
            np.testing.assert_array_equal(model.store[name].value, fresh_model.store[name].value)
        for name in report["copied"]:
            np.testing.assert_array_equal(model.store[name].value, single.store[name].value)
        assert report["frozen"]
        assert all(n.startswith(("encoder.", "backbone.down")) for n in report["frozen"])
        assert model.store.is_frozen("encoder.")
        assert not model.store.is_frozen("backbone.up")
        assert not model.store.is_frozen("gru.")

    def test_frozen_tensors_unchanged_by_training(self, tiny_config, single_frame_checkpoint, sequence):
        path, _ = single_frame_checkpoint
        model = build_model(tiny_config)
        report = transfer_weights(model, path)
        before = {name: model.store[name].value.copy() for name in report["frozen"]}
        up_name = "backbone.up0.deconv.kernel"
        up_before = model.store[up_name].value.copy()

        opt = AdamW(model.store)
        rng = np.random.default_rng(0)
        train_step(model, sequence, opt, tiny_config.loss, rng)
        assert not np.array_equal(model.store[up_name].value, up_before)
        for _ in range(9):
            train_step(model, sequence, opt, tiny_config.loss, rng)
        for name, value in before.items():
            np.testing.assert_array_equal(model.store[name].value, value)

    def test_transfer_rejects_mismatch(self, make_config, tiny_config, tmp_path):
        wide = build_model(make_config(model={"kind": "pointpillars"}, pillars={"channels": 6}))
        save_checkpoint(tmp_path / "wide", wide)
        with pytest.raises(CheckpointError, match="encoder"):
            transfer_weights(build_model(tiny_config), tmp_path / "wide")
        with pytest.raises(CheckpointError, match="unexpected bogus"):
            transfer_weights(build_model(tiny_config), {"bogus": np.zeros(2)})

    def test_strict_load_rejects_single_frame_checkpoint(self, tiny_config, single_frame_checkpoint):
        path, _ = single_frame_checkpoint
        with pytest.raises(CheckpointError, match="missing gru"):
            load_checkpoint(path, build_model(tiny_config))

    def test_save_and_resume(self, tiny_config, tmp_path):
        seqs = [generate_scene(replace(tiny_config.scene, seed=s)) for s in range(2)]
        first = Trainer(build_model(tiny_config), tiny_config.loss, tiny_config.train)
        first.prepare(seqs)
        first.fit(seqs, epochs=1)
        first.save(tmp_path / "ckpt", meta={"note": "resume"})

        second = Trainer(build_model(tiny_config, seed=99), tiny_config.loss, tiny_config.train)
        meta = second.resume(tmp_path / "ckpt")
        assert meta["note"] == "resume"
        assert second.step == first.step == 2
        for name in first.model.store.names():
            np.testing.assert_array_equal(second.model.store[name].value, first.model.store[name].value)
        np.testing.assert_allclose(second.class_weights, first.class_weights)

        assert first.fit(seqs, epochs=1) == second.fit(seqs, epochs=1)
