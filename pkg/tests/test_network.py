import math

import numpy as np
import pytest

from timepillars.dataio import Scan, Sequence, generate_scene
from timepillars.evaluation import decode_detections
from timepillars.geometry import IDENTITY_2D, extract_2d, make_pose
from timepillars.network import (
    AuxHead,
    Backbone,
    BackboneConfig,
    Compensation,
    ConvGRU,
    DetectionHead,
    HeadOutput,
    HiddenState,
    ModelConfig,
    build_model,
    model_forward,
    transform_map,
)
from timepillars.numerics import ParamStore, activation, conv2d, grad_check, no_grad
from timepillars.pillars import GridSpec

from conftest import SEEDS


def stack_head(head):
    return np.concatenate([head.cls, head.loc, head.size, head.heading], axis=-1)


def split_head(dout):
    return {"cls": dout[..., :4], "loc": dout[..., 4:7], "size": dout[..., 7:10], "heading": dout[..., 10:]}


class TestBackbone:
    def test_zero_input_zero_output(self):
        backbone = Backbone(ParamStore(), 4, BackboneConfig([1, 1, 1], [1, 1, 1], 1), rng=np.random.default_rng(0))
        out = backbone.forward(np.zeros((1, 16, 16, 4), dtype=np.float32))
        assert out.shape == (1, 8, 8, 12)
        assert not out.any()

    def test_output_shape_rule(self, rng):
        backbone = Backbone(ParamStore(), 16, BackboneConfig(), rng=np.random.default_rng(0))
        out = backbone.forward(rng.standard_normal((1, 96, 64, 16)).astype(np.float32))
        assert out.shape == (1, 48, 32, 96)
        assert backbone.out_channels == BackboneConfig().output_channels(16) == 96

    def test_input_must_divide_by_eight(self):
        backbone = Backbone(ParamStore(), 2, BackboneConfig([1, 1, 1], [1, 1, 1], 1))
        with pytest.raises(ValueError, match="divisible by 8"):
            backbone.forward(np.zeros((1, 12, 16, 2)))

    def test_channel_mismatch(self):
        backbone = Backbone(ParamStore(), 2, BackboneConfig([1, 1, 1], [1, 1, 1], 1))
        with pytest.raises(ValueError, match="expects 2 channels"):
            backbone.forward(np.zeros((1, 16, 16, 3)))

    def test_three_down_stages_required(self):
        with pytest.raises(ValueError, match="three down stages"):
            BackboneConfig(conv_counts=[2, 2])

    def test_gradient(self, float64, rng):
        store = ParamStore()
        backbone = Backbone(store, 2, BackboneConfig([2, 1, 1], [1, 2, 2], 1), rng=np.random.default_rng(1))
        x = rng.standard_normal((1, 16, 16, 2))
        params = {n: store[n].value for n in store.names() if not store[n].buffer}

        def forward():
            for layer in backbone.layers():
                layer.clear()
            return backbone.forward(x)

        def backward(dout):
            store.zero_grad()
            grads = {"x": backbone.backward(dout)}
            grads.update({n: store[n].grad for n in params})
            return grads

        assert grad_check(forward, backward, {"x": x, **params}, samples=12) <= 1e-4


def gru_reference(gru, h_prev, x):
    """Separate r/z convolutions with the fused kernel split by output channel."""
    hidden = gru.hidden
    w, b = gru.gates.kernel.value, gru.gates.bias.value
    cat = np.concatenate([h_prev, x], axis=-1)
    r = activation(conv2d(cat, w[..., :hidden], b[:hidden])[0], "sigmoid")
    z = activation(conv2d(cat, w[..., hidden:], b[hidden:])[0], "sigmoid")
    cand_in = np.concatenate([r * h_prev, x], axis=-1)
    cand = np.tanh(conv2d(cand_in, gru.candidate.kernel.value, gru.candidate.bias.value)[0])
    return (1 - z) * h_prev + z * cand, cand


class TestConvGRU:
    def make(self, hidden=3, inputs=2, seed=0):
        store = ParamStore()
        return store, ConvGRU(store, "gru", hidden, inputs, 3, rng=np.random.default_rng(seed))

    def test_fused_matches_unfused(self, float64, rng):
        _, gru = self.make()
        gru.gates.bias.value[...] = rng.standard_normal(6)
        h_prev, x = rng.standard_normal((1, 5, 6, 3)), rng.standard_normal((1, 5, 6, 2))
        expected, cand = gru_reference(gru, h_prev, x)
        h = gru.forward(h_prev, x)
        np.testing.assert_allclose(h, expected, atol=1e-6)
        lo, hi = np.minimum(h_prev, cand), np.maximum(h_prev, cand)
        assert np.all(h >= lo - 1e-12) and np.all(h <= hi + 1e-12)

    def test_closed_update_gate_keeps_state(self, float64, rng):
        _, gru = self.make()
        gru.gates.bias.value[3:] = -60.0
        h_prev, x = rng.standard_normal((1, 4, 4, 3)), rng.standard_normal((1, 4, 4, 2))
        np.testing.assert_allclose(gru.forward(h_prev, x), h_prev, atol=1e-9)

    def test_open_gates_give_candidate(self, float64, rng):
        _, gru = self.make()
        gru.gates.bias.value[...] = 60.0
        h_prev, x = rng.standard_normal((1, 4, 4, 3)), rng.standard_normal((1, 4, 4, 2))
        cand, _ = conv2d(np.concatenate([h_prev, x], axis=-1), gru.candidate.kernel.value,
                         gru.candidate.bias.value)
        np.testing.assert_allclose(gru.forward(h_prev, x), np.tanh(cand), atol=1e-9)

    def test_channel_mismatch(self):
        _, gru = self.make()
        with pytest.raises(ValueError, match="GRU expects"):
            gru.forward(np.zeros((1, 4, 4, 2)), np.zeros((1, 4, 4, 2)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, float64, seed):
        rng = np.random.default_rng(seed)
        store, gru = self.make(seed=seed)
        gru.gates.bias.value[...] = rng.standard_normal(6)
        h_prev, x = rng.standard_normal((1, 4, 5, 3)), rng.standard_normal((1, 4, 5, 2))
        params = {n: store[n].value for n in store.names()}

        def forward():
            gru.clear()
            return gru.forward(h_prev, x)

        def backward(dout):
            store.zero_grad()
            dh, dx = gru.backward(dout)
            return {"h": dh, "x": dx, **{n: store[n].grad for n in params}}

        assert grad_check(forward, backward, {"h": h_prev, "x": x, **params}, seed=seed) <= 1e-4


class TestCompensation:
    def test_identity_transform_map(self):
        tmap = transform_map(IDENTITY_2D, (5, 7))
        assert tmap.shape == (1, 5, 7, 6)
        np.testing.assert_array_equal(tmap, np.broadcast_to([1, 0, 0, 1, 0, 0], (1, 5, 7, 6)))

    def test_identity_init_passes_state_through(self, float64, rng):
        comp = Compensation(ParamStore(), "comp", 4, init="identity")
        h = rng.standard_normal((1, 6, 6, 4))
        rel = extract_2d(make_pose(1.0, -0.5, yaw=0.2))
        out = comp.forward(h, IDENTITY_2D)
        np.testing.assert_allclose(out, h, atol=1e-12)
        assert comp.forward(h, rel).shape == h.shape

    def test_unknown_init(self):
        with pytest.raises(ValueError, match="compensation_init"):
            Compensation(ParamStore(), "comp", 4, init="zeros")

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, float64, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        comp = Compensation(store, "comp", 3, rng=np.random.default_rng(seed))
        h = rng.standard_normal((1, 5, 6, 3))
        x, y = rng.uniform(-2.0, 2.0, 2)
        rel = extract_2d(make_pose(x, y, yaw=rng.uniform(-0.5, 0.5)))
        params = {n: store[n].value for n in store.names()}

        def forward():
            comp.clear()
            return comp.forward(h, rel)

        def backward(dout):
            store.zero_grad()
            return {"h": comp.backward(dout), **{n: store[n].grad for n in params}}

        assert grad_check(forward, backward, {"h": h, **params}, seed=seed) <= 1e-4


class TestAuxHead:
    def test_zero_in_zero_out(self):
        aux = AuxHead(ParamStore(), "aux", 3)
        out = aux.forward(np.zeros((1, 4, 4, 3), dtype=np.float32))
        assert out.shape == (1, 4, 4, 3)
        assert not out.any()

    def test_rejected_at_inference(self):
        aux = AuxHead(ParamStore(), "aux", 3)
        aux.training = False
        with pytest.raises(RuntimeError, match="train-time only"):
            aux.forward(np.zeros((1, 4, 4, 3)))


class TestDetectionHead:
    def test_contracts(self, rng):
        head = DetectionHead(ParamStore(), 6, rng=np.random.default_rng(0))
        out = head.forward(rng.standard_normal((1, 5, 4, 6)).astype(np.float32) * 5)
        assert out.grid_shape == (5, 4)
        assert np.all(out.size >= 0)
        np.testing.assert_allclose(out.cls.sum(axis=-1), 1.0, atol=1e-6)
        assert out.heading.shape == (5, 4, 2)

    @pytest.mark.parametrize("scale", [1.0, 2.0])
    def test_decoded_heading_from_sin_cos(self, scale):
        grid = GridSpec(x_min=0.0, x_max=16.0, y_min=-8.0, y_max=8.0, cell=0.5)
        shape = grid.output_shape
        cls = np.zeros(shape + (4,))
        cls[..., 0] = 1.0
        cls[3, 4] = [0.0, 1.0, 0.0, 0.0]
        heading = np.zeros(shape + (2,))
        heading[3, 4] = scale * 0.7071
        head = HeadOutput(cls, np.zeros(shape + (3,)), np.ones(shape + (3,)), heading)
        (box,) = decode_detections(head, grid, score_threshold=0.5)
        assert box.yaw == pytest.approx(math.pi / 4)
        assert (box.cx, box.cy) == pytest.approx((3.5, -3.5))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, float64, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        head = DetectionHead(store, 4, rng=np.random.default_rng(seed))
        features = rng.standard_normal((1, 3, 4, 4))
        params = {n: store[n].value for n in store.names()}

        def forward():
            for layer in head.layers():
                layer.clear()
            return stack_head(head.forward(features))

        def backward(dout):
            store.zero_grad()
            return {"features": head.backward(split_head(dout)), **{n: store[n].grad for n in params}}

        assert grad_check(forward, backward, {"features": features, **params}, seed=seed) <= 1e-4


VARIANTS = [
    {"kind": "pointpillars"},
    {"kind": "mf_pointpillars"},
    {"kind": "timepillars", "compensation": "preprocessing"},
    {"kind": "timepillars", "compensation": "interpolation"},
    {"kind": "timepillars", "compensation": "conv"},
    {"kind": "timepillars", "compensation": "conv", "memory_placement": "before_backbone"},
    {"kind": "timepillars", "compensation": "interpolation", "memory_placement": "before_backbone"},
]


class TestDetector:
    @pytest.fixture
    def sequence(self, tiny_config):
        return generate_scene(tiny_config.scene)

    @pytest.mark.parametrize("model", VARIANTS)
    def test_output_grid_for_every_mode(self, make_config, sequence, model):
        config = make_config(model=model)
        detector = build_model(config)
        head = detector.forward_sequence(sequence)
        assert head.grid_shape == config.grid.output_shape
        np.testing.assert_allclose(head.cls.sum(axis=-1), 1.0, atol=1e-5)
        if config.model.recurrent:
            np.testing.assert_array_equal(detector.state.pose, sequence.core.pose)
            expected = (config.pillars.channels if detector.memory_before
                        else detector.backbone.out_channels)
            assert detector.state.tensor.shape[-1] == expected

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="unknown compensation"):
            ModelConfig(compensation="optical_flow")
        with pytest.raises(ValueError, match="unknown kind"):
            ModelConfig(kind="lstm")

    def test_single_scan_is_gru_from_zero(self, tiny_config, sequence):
        detector = build_model(tiny_config).eval()
        single = Sequence([sequence.core], sequence.annotations, "single")
        with no_grad():
            head = detector.forward_sequence(single)
            features = detector.backbone.forward(detector.pseudo_image(sequence.core.points))
            h = detector.gru.forward(np.zeros_like(features), features)
            expected = detector.head.forward(h)
        np.testing.assert_allclose(stack_head(head), stack_head(expected), atol=1e-6)

    def test_aux_head_train_only(self, tiny_config, sequence):
        detector = build_model(tiny_config)
        detector.forward_sequence(sequence)
        assert detector.aux.calls == 1
        assert detector.last_aux[0].shape == detector.last_aux[1].shape
        detector.eval()
        detector.forward_sequence(sequence)
        assert detector.aux.calls == 1

    def test_warmups_leave_no_tape(self, tiny_config, sequence):
        detector = build_model(tiny_config)
        detector.forward_sequence(sequence)
        assert len(detector._tape) == 1
        detector.forward_sequence(sequence, bptt=True)
        assert len(detector._tape) == len(sequence.scans)

    def test_bptt_needs_differentiable_compensation(self, make_config, sequence):
        detector = build_model(make_config(model={"compensation": "interpolation"}))
        with pytest.raises(ValueError, match="differentiable compensation"):
            detector.forward_sequence(sequence, bptt=True)

    def test_model_forward_carries_state(self, tiny_config, sequence):
        detector = build_model(tiny_config).eval()
        with no_grad():
            head, state = model_forward(detector, sequence)
            assert head.grid_shape == tiny_config.grid.output_shape
            later = Sequence([sequence.core], [], "next")
            _, next_state = model_forward(detector, later, state)
        assert next_state is not state
        assert next_state.tensor.shape == state.tensor.shape

    @pytest.fixture
    def moved_pose(self, sequence):
        pose = sequence.core.pose.copy()
        pose[0, 3] += 1.5
        return pose

    def test_preprocessing_rejects_misaligned_state(self, make_config, sequence, moved_pose):
        detector = build_model(make_config(model={"compensation": "preprocessing"})).eval()
        with no_grad():
            detector.forward_sequence(sequence)
            with pytest.raises(ValueError, match="reference frame"):
                detector.step(Scan(sequence.core.points, moved_pose, sequence.core.timestamp))

    def test_preprocessing_model_forward_reruns_warmup(self, make_config, sequence, moved_pose):
        detector = build_model(make_config(model={"compensation": "preprocessing"})).eval()
        with no_grad():
            expected = stack_head(detector.forward_sequence(sequence))
            channels = detector.state.tensor.shape
            stale = HiddenState(np.ones(channels, dtype=detector.state.tensor.dtype), moved_pose)
            head, state = model_forward(detector, sequence, stale)
        np.testing.assert_array_equal(state.pose, sequence.core.pose)
        np.testing.assert_allclose(stack_head(head), expected, atol=1e-6)

    def test_preprocessing_state_converges_on_static_scene(self, float64, make_config, sequence):
        detector = build_model(make_config(model={"compensation": "preprocessing"})).eval()
        for layer in (detector.gru.gates, detector.gru.candidate):
            layer.kernel.value *= 0.05
        scan = sequence.core
        states = []
        with no_grad():
            for _ in range(8):
                detector.step(scan)
                states.append(detector.state.tensor.copy())
        deltas = [np.linalg.norm(b - a) for a, b in zip(states, states[1:])]
        assert deltas[0] > 0
        assert all(later < earlier for earlier, later in zip(deltas, deltas[1:]))

    @pytest.mark.parametrize("model", [
        {"compensation": "conv", "memory_placement": "after_backbone"},
        {"compensation": "preprocessing", "memory_placement": "before_backbone"},
    ])
    def test_end_to_end_gradient(self, float64, make_config, model):
        config = make_config(
            grid={"x_min": 0.0, "x_max": 8.0, "y_min": -4.0, "y_max": 4.0, "cell": 0.5},
            pillars={"channels": 2},
            scene={"placement_x": [1.0, 7.0], "placement_y": [-3.0, 3.0], "seed": 4,
                   "object_counts": {"vehicle": 1, "cyclist": 1, "pedestrian": 0, "unclear": 0}},
            model=model,
        )
        sequence = generate_scene(config.scene)
        detector = build_model(config)
        params = {n: detector.store[n].value for n in detector.store.names() if not detector.store[n].buffer}

        def forward():
            return stack_head(detector.forward_sequence(sequence, bptt=True))

        def backward(dout):
            detector.store.zero_grad()
            detector.backward(split_head(dout))
            return {n: detector.store[n].grad for n in params}

        assert grad_check(forward, backward, params, samples=6, seed=1) <= 1e-3
