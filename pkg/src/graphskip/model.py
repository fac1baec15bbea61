"""Full segmentation network: encoder, fused-feature graph gate, decoder, heads.

The four encoder stage maps are projected to a shared width, resized to one
target grid, and concatenated; the graph block and the entropy-selected
spatial gate refine the concatenation; slabs are resized back and added to
the per-stage projections (residual); a conv decoder walks back up the
pyramid with region/boundary heads at every stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from .entropy_gate import efs_spatial_attention
from .errors import ConfigError, ShapeError, ValidationError
from .graph import GnnBlock
from .nn import (BatchNormState, batchnorm, bilinear_resize, conv2d_1x1,
                 conv2d_3x3, kaiming_uniform)
from .rng import keyed_rng
from .tensor import DTYPES, Parameter, Tensor, concat, narrow, relu, sigmoid

GNN_MODES = ("s0", "s1", "s2", "s3", "s4")


@dataclass
class ModelConfig:
    input_size: Tuple[int, int] = (64, 64)
    encoder_channels: Tuple[int, int, int, int] = (16, 32, 64, 128)
    reduced_channels: int = 64
    scale: int = 3
    k_neighbors: int = 11
    conv1d_width: int = 3
    m_channels: int = 64
    repetitions: int = 1
    dilation: int = 1
    gnn_mode: str = "s4"
    decoder_channels: int = 0
    zero_branch: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ConfigError(f"input size must be divisible by 32, got {h}x{w}")
        if len(self.encoder_channels) != 4:
            raise ConfigError("encoder needs exactly four stage widths")
        if self.scale not in (2, 3, 4, 5):
            raise ConfigError(f"target scale must be in 2..5, got {self.scale}")
        if self.reduced_channels < 1:
            raise ConfigError("reduced width must be >= 1")
        if not 1 <= self.m_channels <= 4 * self.reduced_channels:
            raise ConfigError(f"M must be in [1, {4 * self.reduced_channels}], "
                              f"got {self.m_channels}")
        if self.conv1d_width % 2 == 0:
            raise ConfigError("node-attention conv width must be odd")
        if self.gnn_mode not in GNN_MODES:
            raise ConfigError(f"gnn_mode must be one of {GNN_MODES}")
        if self.repetitions < 1 or self.k_neighbors < 1 or self.dilation < 1:
            raise ConfigError("K, G, dilation must all be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be float32 or float64")
        if self.decoder_channels == 0:
            self.decoder_channels = self.reduced_channels
        if self.gnn_mode != "s0":
            n = self.target_size[0] * self.target_size[1]
            if n <= self.k_neighbors * self.dilation:
                raise ConfigError(
                    f"target grid has {n} nodes but K*d="
                    f"{self.k_neighbors * self.dilation}; reduce K or scale")

    @property
    def target_size(self) -> Tuple[int, int]:
        h, w = self.input_size
        return (h // 2 ** self.scale, w // 2 ** self.scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


class ConvBNRelu:
    """3x3 conv (no bias) + batch norm + ReLU."""

    def __init__(self, cin: int, cout: int, stride: int, rng, dtype, prefix: str):
        self.stride = stride
        self.w = Parameter(Tensor(kaiming_uniform(rng, (cout, cin, 3, 3),
                                                  cin * 9, dtype),
                                  requires_grad=True), f"{prefix}.weight")
        self.gamma = Parameter(Tensor(np.ones(cout, dtype=dtype),
                                      requires_grad=True), f"{prefix}.bn.gamma")
        self.beta = Parameter(Tensor(np.zeros(cout, dtype=dtype),
                                     requires_grad=True), f"{prefix}.bn.beta")
        self.state = BatchNormState(cout, dtype)
        self.prefix = prefix

    def forward(self, x: Tensor, mode: str) -> Tensor:
        h = conv2d_3x3(x, self.w.value, stride=self.stride)
        return relu(batchnorm(h, self.gamma.value, self.beta.value,
                              self.state, mode))

    def parameters(self) -> List[Parameter]:
        return [self.w, self.gamma, self.beta]


class Encoder:
    """Stem of two stride-2 convs, then four two-conv stages (/4 .. /32)."""

    def __init__(self, channels, rng, dtype):
        c1, c2, c3, c4 = channels
        self.stem = [ConvBNRelu(3, c1, 2, rng, dtype, "enc.stem.0"),
                     ConvBNRelu(c1, c1, 2, rng, dtype, "enc.stem.1")]
        widths = [(c1, c1), (c1, c2), (c2, c3), (c3, c4)]
        self.stages = []
        for i, (cin, cout) in enumerate(widths):
            entry_stride = 1 if i == 0 else 2
            self.stages.append([
                ConvBNRelu(cin, cout, entry_stride, rng, dtype,
                           f"enc.stage{i + 1}.0"),
                ConvBNRelu(cout, cout, 1, rng, dtype, f"enc.stage{i + 1}.1")])

    def forward(self, x: Tensor, mode: str) -> List[Tensor]:
        h = x
        for layer in self.stem:
            h = layer.forward(h, mode)
        pyramid = []
        for stage in self.stages:
            for layer in stage:
                h = layer.forward(h, mode)
            pyramid.append(h)
        return pyramid

    def layers(self) -> List[ConvBNRelu]:
        return self.stem + [l for stage in self.stages for l in stage]


class DecoderBlock:
    """Concat skip + upsampled state, then two conv+BN+ReLU at one resolution."""

    def __init__(self, cin: int, cout: int, rng, dtype, prefix: str):
        self.a = ConvBNRelu(cin, cout, 1, rng, dtype, f"{prefix}.0")
        self.b = ConvBNRelu(cout, cout, 1, rng, dtype, f"{prefix}.1")

    def forward(self, skip: Tensor, below: Tensor, mode: str) -> Tensor:
        up = bilinear_resize(below, skip.shape[2:])
        h = concat([skip, up], axis=1)
        return self.b.forward(self.a.forward(h, mode), mode)

    def layers(self) -> List[ConvBNRelu]:
        return [self.a, self.b]


class SkipNet:
    """The assembled network; one instance owns every Parameter and BN state."""

    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = DTYPES[config.dtype]
        self.dtype = dtype
        rng = keyed_rng(config.seed, 0)
        cr = config.reduced_channels
        ht, wt = config.target_size
        n = ht * wt

        self.encoder = Encoder(config.encoder_channels, rng, dtype)

        self.proj_w, self.proj_b = [], []
        for i, ci in enumerate(config.encoder_channels):
            self.proj_w.append(Parameter(
                Tensor(kaiming_uniform(rng, (cr, ci), ci, dtype),
                       requires_grad=True), f"pre.proj{i + 1}.weight"))
            self.proj_b.append(Parameter(
                Tensor(np.zeros(cr, dtype=dtype), requires_grad=True),
                f"pre.proj{i + 1}.bias"))

        self.gnn: Optional[GnnBlock] = None
        self.efs_w: Optional[Parameter] = None
        self.efs_b: Optional[Parameter] = None
        if config.gnn_mode != "s0":
            gnn_channels = cr if config.gnn_mode in ("s1", "s2") else 4 * cr
            with_na = config.gnn_mode in ("s2", "s4")
            self.gnn = GnnBlock(gnn_channels, n, config.k_neighbors,
                                config.dilation, config.conv1d_width, with_na,
                                config.repetitions, rng, dtype, "gnn")
            self.efs_w = Parameter(Tensor(np.zeros((1, config.m_channels),
                                                   dtype=dtype),
                                          requires_grad=True), "efs.proj.weight")
            self.efs_b = Parameter(Tensor(np.zeros(1, dtype=dtype),
                                          requires_grad=True), "efs.proj.bias")

        dc = config.decoder_channels
        self.decoder = [DecoderBlock(cr + (cr if i == 0 else dc), dc, rng,
                                     dtype, f"dec.{i}") for i in range(3)]

        self.head_w, self.head_b = [], []
        head_widths = [cr, dc, dc, dc]
        for i, hw in enumerate(head_widths):
            for kind in ("region", "boundary"):
                self.head_w.append(Parameter(
                    Tensor(kaiming_uniform(rng, (1, hw), hw, dtype),
                           requires_grad=True), f"head.{kind}{i + 1}.weight"))
                self.head_b.append(Parameter(
                    Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
                    f"head.{kind}{i + 1}.bias"))

        self._params = self._collect_parameters()
        names = [p.name for p in self._params]
        if len(names) != len(set(names)):
            raise ValidationError("duplicate parameter names in registration")
        self._bn_entries = self._collect_bn_states()

    # -- registration -------------------------------------------------------

    def _collect_parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        for layer in self.encoder.layers():
            out.extend(layer.parameters())
        for w, b in zip(self.proj_w, self.proj_b):
            out.extend([w, b])
        if self.gnn is not None:
            out.extend(self.gnn.parameters())
            out.extend([self.efs_w, self.efs_b])
        for block in self.decoder:
            for layer in block.layers():
                out.extend(layer.parameters())
        out.extend(p for pair in zip(self.head_w, self.head_b) for p in pair)
        return out

    def _collect_bn_states(self):
        entries = []
        for layer in self.encoder.layers():
            entries.append((layer.prefix, layer.state))
        if self.gnn is not None:
            for gi, stage in enumerate(self.gnn.stages):
                for tag, state in zip(("pre", "post", "ffn1", "ffn2"),
                                      stage.bn_states()):
                    entries.append((f"gnn.{gi}.{tag}", state))
        for block in self.decoder:
            for layer in block.layers():
                entries.append((layer.prefix, layer.state))
        return entries

    def parameters(self) -> List[Parameter]:
        return list(self._params)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(p.name, p.value) for p in self._params]

    def param_count(self) -> int:
        return sum(p.value.size for p in self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    def named_state(self):
        names, arrays = [], []
        for name, state in self._bn_entries:
            names.append(f"{name}.running_mean")
            arrays.append(state.running_mean)
            names.append(f"{name}.running_var")
            arrays.append(state.running_var)
        return names, arrays

    def load_state(self, arrays) -> None:
        if len(arrays) != 2 * len(self._bn_entries):
            raise ValidationError(f"expected {2 * len(self._bn_entries)} state "
                                  f"arrays, got {len(arrays)}")
        for (name, state), mean, var in zip(self._bn_entries, arrays[0::2],
                                            arrays[1::2]):
            state.running_mean = np.asarray(mean, dtype=state.running_mean.dtype)
            state.running_var = np.asarray(var, dtype=state.running_var.dtype)

    # -- forward pieces ------------------------------------------------------

    def encode(self, image: Tensor, mode: str) -> List[Tensor]:
        h, w = self.config.input_size
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (h, w):
            raise ShapeError(f"expected (B,3,{h},{w}) input, got {image.shape}")
        return self.encoder.forward(image, mode)

    def preprocess(self, pyramid: List[Tensor]):
        """Stage-resolution projections f'_i plus their fused target-grid concat."""
        fprime = [conv2d_1x1(f, w.value, b.value)
                  for f, w, b in zip(pyramid, self.proj_w, self.proj_b)]
        target = self.config.target_size
        resized = [bilinear_resize(fp, target) for fp in fprime]
        return fprime, resized, concat(resized, axis=1)

    def postprocess(self, fhat_c: Tensor, fprime: List[Tensor]) -> List[Tensor]:
        cr = self.config.reduced_channels
        if fhat_c.shape[1] != 4 * cr:
            raise ShapeError(f"fused map must have {4 * cr} channels")
        out = []
        for i, fp in enumerate(fprime):
            slab = narrow(fhat_c, 1, i * cr, cr)
            out.append(fp + bilinear_resize(slab, fp.shape[2:]))
        return out

    def _branch(self, resized: List[Tensor], f_c: Tensor, mode: str,
                choices: Optional[dict], capture: Optional[dict]) -> Tensor:
        cfg = self.config
        graphs = choices.get("graphs") if choices else None
        indices = choices.get("efs_indices") if choices else None
        graph_cap = [] if capture is not None else None
        efs_cap: Optional[Dict] = {} if capture is not None else None
        if cfg.gnn_mode in ("s1", "s2"):
            gated = self.gnn.forward(resized[3], mode, graphs, graph_cap)
            fused = concat(resized[:3] + [gated], axis=1)
        else:
            fused = self.gnn.forward(f_c, mode, graphs, graph_cap)
        out = efs_spatial_attention(fused, cfg.m_channels, self.efs_w.value,
                                    self.efs_b.value, indices, efs_cap)
        if capture is not None:
            capture["graphs"] = graph_cap
            capture["efs_indices"] = efs_cap["indices"]
            capture["efs_attention"] = efs_cap["attention"]
        return out

    def forward(self, image: Tensor, mode: str = "train",
                choices: Optional[dict] = None,
                capture: Optional[dict] = None) -> List[Tuple[Tensor, Tensor]]:
        """Returns four (region, boundary) probability pairs at full resolution."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        pyramid = self.encode(image, mode)
        fprime, resized, f_c = self.preprocess(pyramid)
        if cfg.zero_branch:
            fhat_c = Tensor(np.zeros(f_c.shape, dtype=self.dtype))
        elif cfg.gnn_mode == "s0":
            fhat_c = f_c
        else:
            fhat_c = self._branch(resized, f_c, mode, choices, capture)
        fhat = self.postprocess(fhat_c, fprime)

        states = [fhat[3]]
        for i, block in enumerate(self.decoder):
            states.append(block.forward(fhat[2 - i], states[-1], mode))

        outputs = []
        full = cfg.input_size
        for i, d in enumerate(states):
            rw, rb = self.head_w[2 * i], self.head_b[2 * i]
            bw, bb = self.head_w[2 * i + 1], self.head_b[2 * i + 1]
            region = bilinear_resize(sigmoid(conv2d_1x1(d, rw.value, rb.value)),
                                     full)
            boundary = bilinear_resize(sigmoid(conv2d_1x1(d, bw.value, bb.value)),
                                       full)
            outputs.append((region, boundary))
        return outputs
