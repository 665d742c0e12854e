"""
Backbone, convGRU memory, ego-motion compensation, heads and the model.

All feature maps are NHWC with batch size 1. Every block follows the layer
protocol of :mod:`timepillars.numerics`: ``forward`` records a cache (unless
gradients are disabled) and ``backward`` consumes the most recent one and
accumulates parameter gradients.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dataio import Scan
from .geometry import (
    extract_2d,
    relative_transform,
    transform_points,
    warp_feature_map,
)
from .numerics import (
    Activation,
    BatchNorm,
    Conv2D,
    ConvBNReLU,
    ConvTranspose2D,
    Layer,
    ParamStore,
    activation,
    activation_backward,
    grad_enabled,
    no_grad,
)
from .pillars import OUTPUT_STRIDE, PillarEncoder, pillarize, prepare_points

MODEL_KINDS = ("pointpillars", "mf_pointpillars", "timepillars")
PLACEMENTS = ("before_backbone", "after_backbone")
COMPENSATIONS = ("preprocessing", "interpolation", "conv")
COMPENSATION_INITS = ("he", "identity")
TRANSFORM_CHANNELS = 6


@dataclass
class BackboneConfig:
    """Three down stages (stride-2 first conv) and three up stages merged at stride 2."""

    conv_counts: list = field(default_factory=lambda: [2, 2, 2])
    channel_multipliers: list = field(default_factory=lambda: [2, 2, 4])
    up_multiplier: int = 2

    def __post_init__(self):
        if len(self.conv_counts) != 3 or len(self.channel_multipliers) != 3:
            raise ValueError("the backbone has exactly three down stages")
        if min(self.conv_counts) < 1 or min(self.channel_multipliers) < 1 or self.up_multiplier < 1:
            raise ValueError("backbone conv counts and channel multipliers must be >= 1")

    def output_channels(self, channels):
        return 3 * self.up_multiplier * channels


@dataclass
class ModelConfig:
    kind: str = "timepillars"
    memory_placement: str = "after_backbone"
    compensation: str = "conv"
    compensation_init: str = "he"
    aux_task: bool = True
    n_scans: int = 3
    gru_kernel: int = 3

    def __post_init__(self):
        for value, allowed, key in ((self.kind, MODEL_KINDS, "kind"),
                                    (self.memory_placement, PLACEMENTS, "memory_placement"),
                                    (self.compensation, COMPENSATIONS, "compensation"),
                                    (self.compensation_init, COMPENSATION_INITS, "compensation_init")):
            if value not in allowed:
                raise ValueError(f"unknown {key} {value!r}, expected one of {allowed}")
        if not 1 <= self.n_scans <= 11:
            raise ValueError(f"n_scans must lie in [1, 11], got {self.n_scans}")
        if self.gru_kernel < 1 or self.gru_kernel % 2 == 0:
            raise ValueError(f"gru_kernel must be a positive odd number, got {self.gru_kernel}")

    @property
    def recurrent(self):
        return self.kind == "timepillars"

    @property
    def uses_aux(self):
        return self.recurrent and self.compensation == "conv" and self.aux_task


@dataclass
class HiddenState:
    """Recurrent memory and the ego pose of the frame it is expressed in."""

    tensor: np.ndarray
    pose: np.ndarray


class AuxPair(NamedTuple):
    """Aux head output and the inputs of the analytic warp it is trained against."""

    output: np.ndarray
    h_prev: np.ndarray
    rel2d: object
    grid_meta: object


@dataclass
class HeadOutput:
    """Per-cell maps on the output grid, batch axis dropped."""

    cls: np.ndarray      # (H, W, 4) probabilities, background first
    loc: np.ndarray      # (H, W, 3) dx, dy from the cell center, z
    size: np.ndarray     # (H, W, 3) l, w, h
    heading: np.ndarray  # (H, W, 2) sin, cos

    @property
    def grid_shape(self):
        return self.cls.shape[:2]


def _concat(*arrays):
    return np.concatenate(arrays, axis=-1)


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

class UpBlock:
    """Transposed conv (kernel = stride) -> BN -> ReLU."""

    def __init__(self, store, name, in_channels, out_channels, stride, rng):
        self.deconv = ConvTranspose2D(store, f"{name}.deconv", in_channels, out_channels,
                                      kernel=stride, stride=stride, rng=rng)
        self.bn = BatchNorm(store, f"{name}.bn", out_channels)
        self.relu = Activation("relu")

    def layers(self):
        return [self.deconv, self.bn, self.relu]

    def forward(self, x):
        return self.relu.forward(self.bn.forward(self.deconv.forward(x)))

    def backward(self, dout):
        return self.deconv.backward(self.bn.backward(self.relu.backward(dout)))


class Backbone:
    """(1, L, W, C) pseudo-image -> (1, L/2, W/2, 6C) features."""

    def __init__(self, store, channels, config, name="backbone", rng=None):
        self.config = config
        self.down = []
        in_ch = channels
        for k, (count, mult) in enumerate(zip(config.conv_counts, config.channel_multipliers)):
            out_ch = mult * channels
            blocks = [ConvBNReLU(store, f"{name}.down{k}.conv0", in_ch, out_ch, 3, stride=2, rng=rng)]
            blocks += [ConvBNReLU(store, f"{name}.down{k}.conv{n}", out_ch, out_ch, 3, rng=rng)
                       for n in range(1, count)]
            self.down.append(blocks)
            in_ch = out_ch
        up_ch = config.up_multiplier * channels
        self.up = [
            UpBlock(store, f"{name}.up{k}", mult * channels, up_ch, 2 ** k, rng)
            for k, mult in enumerate(config.channel_multipliers)
        ]
        self.out_channels = 3 * up_ch

    def layers(self):
        return [layer for blocks in self.down for block in blocks for layer in block.layers()] + \
               [layer for block in self.up for layer in block.layers()]

    def forward(self, x):
        if x.shape[1] % 8 or x.shape[2] % 8:
            raise ValueError(f"backbone input {x.shape[1:3]} must be divisible by 8 in both grid dims")
        if x.shape[-1] != self.down[0][0].conv.in_channels:
            raise ValueError(f"backbone expects {self.down[0][0].conv.in_channels} channels, got {x.shape[-1]}")
        outputs = []
        for blocks in self.down:
            for block in blocks:
                x = block.forward(x)
            outputs.append(x)
        return _concat(*(up.forward(out) for up, out in zip(self.up, outputs)))

    def backward(self, dout):
        splits = np.split(dout, 3, axis=-1)
        dstage = [up.backward(d) for up, d in zip(self.up, splits)]
        dx = None
        for k in reversed(range(3)):
            grad = dstage[k] if dx is None else dstage[k] + dx
            for block in reversed(self.down[k]):
                grad = block.backward(grad)
            dx = grad
        return dx


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------

class ConvGRU(Layer):
    """
    Convolutional GRU with fused reset/update gates.

    One convolution over concat(h, x) with 2 * hidden filters yields r and z;
    the candidate uses a second convolution over concat(r * h, x)::

        h = (1 - z) * h_prev + z * tanh(W_h * [r * h_prev, x] + b_h)
    """

    def __init__(self, store, name, hidden_channels, input_channels, kernel=3, rng=None):
        super().__init__()
        self.hidden = hidden_channels
        self.input_channels = input_channels
        both = hidden_channels + input_channels
        self.gates = Conv2D(store, f"{name}.gates", both, 2 * hidden_channels, kernel, rng=rng)
        self.candidate = Conv2D(store, f"{name}.candidate", both, hidden_channels, kernel, rng=rng)

    def forward(self, h_prev, x):
        if h_prev.shape[-1] != self.hidden or x.shape[-1] != self.input_channels:
            raise ValueError(
                f"GRU expects hidden {self.hidden} / input {self.input_channels} channels, "
                f"got {h_prev.shape[-1]} / {x.shape[-1]}"
            )
        if h_prev.shape[:3] != x.shape[:3]:
            raise ValueError(f"hidden state {h_prev.shape} and input {x.shape} are not spatially aligned")
        g = activation(self.gates.forward(_concat(h_prev, x)), "sigmoid")
        r, z = g[..., :self.hidden], g[..., self.hidden:]
        cand = activation(self.candidate.forward(_concat(r * h_prev, x)), "tanh")
        h = (1.0 - z) * h_prev + z * cand
        self._push((h_prev, g, cand))
        return h

    def backward(self, dh):
        """Returns (dh_prev, dx)."""
        h_prev, g, cand = self._pop()
        r, z = g[..., :self.hidden], g[..., self.hidden:]
        dh_prev = dh * (1.0 - z)
        dz = dh * (cand - h_prev)
        dcat = self.candidate.backward(activation_backward(dh * z, cand, "tanh"))
        drh, dx = dcat[..., :self.hidden], dcat[..., self.hidden:]
        dh_prev = dh_prev + drh * r
        dg = activation_backward(_concat(drh * h_prev, dz), g, "sigmoid")
        dcat = self.gates.backward(dg)
        return dh_prev + dcat[..., :self.hidden], dx + dcat[..., self.hidden:]

    def clear(self):
        super().clear()
        self.gates.clear()
        self.candidate.clear()


def transform_map(rel2d, spatial_shape, dtype=np.float64):
    """Broadcast the six Transform2D values to a (1, H, W, 6) map."""
    height, width = spatial_shape
    values = rel2d.as_array(dtype)
    return np.broadcast_to(values, (1, height, width, TRANSFORM_CHANNELS)).copy()


class Compensation(Layer):
    """Single convolution over concat(h_prev, transform map) re-expressing h_prev in the current frame."""

    def __init__(self, store, name, channels, kernel=3, init="he", rng=None):
        super().__init__()
        if init not in COMPENSATION_INITS:
            raise ValueError(f"unknown compensation_init {init!r}, expected one of {COMPENSATION_INITS}")
        self.channels = channels
        self.conv = Conv2D(store, f"{name}.conv", channels + TRANSFORM_CHANNELS, channels, kernel, rng=rng)
        if init == "identity":
            kernel_value = self.conv.kernel.value
            kernel_value[...] = 0
            center = kernel // 2
            kernel_value[center, center, np.arange(channels), np.arange(channels)] = 1

    def forward(self, h_prev, rel2d):
        tmap = transform_map(rel2d, h_prev.shape[1:3], h_prev.dtype)
        self._push(None)
        return self.conv.forward(_concat(h_prev, tmap))

    def backward(self, dout):
        self._pop()
        return self.conv.backward(dout)[..., :self.channels]

    def clear(self):
        super().clear()
        self.conv.clear()


class AuxHead(Layer):
    """Train-time CNN regressing the compensated state onto the analytic warp."""

    def __init__(self, store, name, channels, rng=None):
        super().__init__()
        self.conv1 = Conv2D(store, f"{name}.conv1", channels, channels, 3, rng=rng)
        self.relu = Activation("relu")
        self.conv2 = Conv2D(store, f"{name}.conv2", channels, channels, 3, rng=rng)
        self.training = True
        self.calls = 0

    def forward(self, x):
        if not self.training:
            raise RuntimeError("the auxiliary head is train-time only and cannot run at inference")
        self.calls += 1
        return self.conv2.forward(self.relu.forward(self.conv1.forward(x)))

    def backward(self, dout):
        return self.conv1.backward(self.relu.backward(self.conv2.backward(dout)))

    def clear(self):
        for layer in (self.conv1, self.relu, self.conv2):
            layer.clear()


# ---------------------------------------------------------------------------
# Detection head
# ---------------------------------------------------------------------------

HEAD_CHANNELS = {"cls": 4, "loc": 3, "size": 3, "heading": 2}


class DetectionHead:
    """Anchor-free per-cell head: parallel 1x1 convolutions."""

    def __init__(self, store, in_channels, name="head", rng=None):
        self.convs = {key: Conv2D(store, f"{name}.{key}", in_channels, n, kernel=1, rng=rng)
                      for key, n in HEAD_CHANNELS.items()}
        self.softmax = Activation("softmax_channels")
        self.relu = Activation("relu")

    @property
    def cls_bias(self):
        return self.convs["cls"].bias

    @property
    def cls_kernel(self):
        return self.convs["cls"].kernel

    def layers(self):
        return list(self.convs.values()) + [self.softmax, self.relu]

    def forward(self, features):
        out = HeadOutput(
            cls=self.softmax.forward(self.convs["cls"].forward(features)),
            loc=self.convs["loc"].forward(features),
            size=self.relu.forward(self.convs["size"].forward(features)),
            heading=self.convs["heading"].forward(features),
        )
        return HeadOutput(out.cls[0], out.loc[0], out.size[0], out.heading[0])

    def backward(self, grads):
        """``grads`` maps cls/loc/size/heading to (H, W, k) gradients of the loss."""
        dfeat = self.convs["cls"].backward(self.softmax.backward(grads["cls"][None]))
        dfeat = dfeat + self.convs["loc"].backward(grads["loc"][None])
        dfeat = dfeat + self.convs["size"].backward(self.relu.backward(grads["size"][None]))
        return dfeat + self.convs["heading"].backward(grads["heading"][None])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Detector:
    """
    Pillar encoder, backbone, optional recurrent memory and detection head.

    ``kind`` selects the single-frame baseline (``pointpillars``), input-level
    multi-scan aggregation (``mf_pointpillars``) or the recurrent model
    (``timepillars``) whose memory sits before or after the backbone and is
    carried across scans by preprocessing, interpolation or conv compensation.
    """

    def __init__(self, grid, pillar_config, backbone_config, model_config, seed=0):
        self.grid = grid
        self.pillar_config = pillar_config
        self.backbone_config = backbone_config
        self.config = model_config
        self.store = ParamStore()
        self.training = True
        rng = np.random.default_rng(seed)

        channels = pillar_config.channels
        self.encoder = PillarEncoder(self.store, grid, pillar_config, rng=rng)
        self.backbone = Backbone(self.store, channels, backbone_config, rng=rng)
        self.gru = self.compensation = self.aux = None
        if model_config.recurrent:
            hidden = channels if self.memory_before else self.backbone.out_channels
            self.gru = ConvGRU(self.store, "gru", hidden, hidden, model_config.gru_kernel, rng=rng)
            if model_config.compensation == "conv":
                self.compensation = Compensation(self.store, "compensation", hidden,
                                                 init=model_config.compensation_init, rng=rng)
            if model_config.uses_aux:
                self.aux = AuxHead(self.store, "aux", hidden, rng=rng)
        self.head = DetectionHead(self.store, self.backbone.out_channels, rng=rng)

        self.state = None
        self.last_aux = None
        self.last_dropped = 0
        self._tape = []

    # -- modes ---------------------------------------------------------------

    @property
    def memory_before(self):
        return self.config.recurrent and self.config.memory_placement == "before_backbone"

    @property
    def memory_stride(self):
        return 1 if self.memory_before else OUTPUT_STRIDE

    def batchnorms(self):
        layers = [self.encoder.bn] + self.backbone.layers()
        return [layer for layer in layers if isinstance(layer, BatchNorm)]

    def train(self):
        self.training = True
        for bn in self.batchnorms():
            bn.training = True
        if self.aux is not None:
            self.aux.training = True
        return self

    def eval(self):
        self.training = False
        for bn in self.batchnorms():
            bn.training = False
        if self.aux is not None:
            self.aux.training = False
        return self

    def reset_state(self):
        self.state = None
        self.last_aux = None

    def clear(self):
        """Drop every recorded forward cache."""
        self._tape.clear()
        self.encoder.clear()
        for layer in self.backbone.layers() + self.head.layers():
            layer.clear()
        for block in (self.gru, self.compensation, self.aux):
            if block is not None:
                block.clear()

    # -- forward -------------------------------------------------------------

    def pseudo_image(self, points):
        pillarized = pillarize(prepare_points(points, self.pillar_config), self.grid)
        self.last_dropped = pillarized.n_dropped
        decorated = pillarized.decorated.astype(self.encoder.pfn.conv.kernel.value.dtype, copy=False)
        return self.encoder.forward(decorated, pillarized.cell_index)

    def step(self, scan, reference_pose=None, with_head=True):
        """
        Process one scan and advance the hidden state.

        Args:
            scan: Scan to process
            reference_pose: Frame raw points are moved into before pillarization
                (preprocessing compensation); defaults to the scan's own pose
            with_head: Evaluate the detection head (False for warm-up scans)

        Returns:
            HeadOutput, or None when ``with_head`` is False
        """
        cfg = self.config
        pose = scan.pose if reference_pose is None else reference_pose
        points = scan.points
        if cfg.recurrent and cfg.compensation == "preprocessing":
            points = transform_points(points, relative_transform(pose, scan.pose))
        else:
            pose = scan.pose
        x = self.pseudo_image(points)

        entry = {"head": with_head, "state_in": self.state is not None, "aux": False}
        if not cfg.recurrent:
            features = self.backbone.forward(x)
        else:
            if not self.memory_before:
                x = self.backbone.forward(x)
            h_prev = self._incoming_state(pose, x, entry, with_head)
            h = self.gru.forward(h_prev, x)
            self.state = HiddenState(h, pose)
            features = self.backbone.forward(h) if self.memory_before else h

        head = self.head.forward(features) if with_head else None
        if grad_enabled():
            self._tape.append(entry)
        return head

    def _incoming_state(self, pose, x, entry, with_head):
        if self.state is None:
            return np.zeros_like(x)
        rel2d = extract_2d(relative_transform(pose, self.state.pose))
        prev = self.state.tensor
        mode = self.config.compensation
        if mode == "preprocessing":
            if not np.allclose(self.state.pose, pose, atol=1e-9):
                raise ValueError(
                    "preprocessing compensation needs the hidden state in the reference frame of the "
                    "current scan; rerun the warm-up window instead of carrying the state"
                )
            return prev
        meta = self.grid.meta(self.memory_stride)
        if mode == "interpolation":
            return warp_feature_map(prev, rel2d, meta)
        compensated = self.compensation.forward(prev, rel2d)
        if self.aux is not None and self.training and with_head:
            self.last_aux = AuxPair(self.aux.forward(compensated), prev, rel2d, meta)
            entry["aux"] = True
        return compensated

    def forward_sequence(self, sequence, n_warmup=None, bptt=False):
        """
        Run the model over the tail of a sequence and predict on the core frame.

        ``n_warmup`` past scans (default ``n_scans - 1``, capped by what the
        sequence holds) run before the core frame without a head. Warm-up
        passes record no gradient unless ``bptt`` is set, so the hidden state
        value is carried but back-propagation stops at the core frame. For
        ``mf_pointpillars`` the warm-up scans are instead merged into the core
        frame at the input.
        """
        if bptt and self.config.compensation == "interpolation":
            raise ValueError("back-propagation through warm-up scans needs a differentiable compensation")
        available = len(sequence.past)
        if n_warmup is None:
            n_warmup = self.config.n_scans - 1
        n_warmup = min(n_warmup, available)
        self.reset_state()
        self.clear()
        scans = sequence.scans[len(sequence.scans) - 1 - n_warmup:]
        core = sequence.core

        if self.config.kind == "mf_pointpillars":
            merged = [transform_points(s.points, relative_transform(core.pose, s.pose)) for s in scans]
            return self.step(Scan(np.vstack(merged), core.pose, core.timestamp))
        if not self.config.recurrent:
            return self.step(core)

        with nullcontext() if bptt else no_grad():
            for scan in scans[:-1]:
                self.step(scan, reference_pose=core.pose, with_head=False)
        return self.step(core, reference_pose=core.pose)

    # -- backward ------------------------------------------------------------

    def backward(self, head_grads, aux_grad=None):
        """
        Back-propagate from the head through every recorded step.

        Steps recorded with gradients enabled are unrolled in reverse; warm-up
        scans run under ``no_grad`` are not on the tape, which cuts the
        gradient at the hidden state they produced.
        """
        if not self._tape:
            raise RuntimeError("backward() called without a recorded forward pass")
        dstate = None
        first = True
        while self._tape:
            entry = self._tape.pop()
            dstate = self._backward_step(entry, head_grads if first else None,
                                         aux_grad if first else None, dstate)
            first = False

    def _backward_step(self, entry, head_grads, aux_grad, dstate_out):
        dfeat = self.head.backward(head_grads) if entry["head"] else None
        if not self.config.recurrent:
            self.encoder.backward(self.backbone.backward(dfeat))
            return None

        if self.memory_before:
            dh = None if dfeat is None else self.backbone.backward(dfeat)
        else:
            dh = dfeat
        if dstate_out is not None:
            dh = dstate_out if dh is None else dh + dstate_out
        if dh is None:
            raise RuntimeError("no gradient reaches the recorded step")

        dh_prev, dx = self.gru.backward(dh)
        dx = dx if self.memory_before else self.backbone.backward(dx)
        self.encoder.backward(dx)

        if not entry["state_in"]:
            return None
        mode = self.config.compensation
        if mode == "interpolation":
            return None
        if mode == "conv":
            if entry["aux"]:
                dh_prev = dh_prev + self.aux.backward(aux_grad if aux_grad is not None
                                                      else np.zeros_like(dh_prev))
            return self.compensation.backward(dh_prev)
        return dh_prev


def model_forward(model, sequence, state=None):
    """
    Functional wrapper: run ``model`` over ``sequence`` from ``state``.

    Preprocessing compensation moves raw points into the core frame, so a
    carried state is only usable when it already lives in that frame. A
    state from any other pose is dropped and the warm-up window of
    ``sequence`` is rerun.

    Returns:
        (HeadOutput, HiddenState) for the core frame
    """
    aligned = state is not None and np.allclose(state.pose, sequence.core.pose, atol=1e-9)
    if state is None or (model.config.compensation == "preprocessing" and not aligned):
        head = model.forward_sequence(sequence)
        return head, model.state
    model.clear()
    model.state = state
    head = model.step(sequence.core)
    return head, model.state


def build_model(config, seed=None):
    """Detector from a RunConfig-like object with grid/pillars/backbone/model sections."""
    seed = config.train.seed if seed is None else seed
    return Detector(config.grid, config.pillars, config.backbone, config.model, seed=seed)
