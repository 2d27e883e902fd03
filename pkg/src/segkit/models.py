"""Mini-FCN builder, ConvLSTM-FCN conversion and graph execution."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as ts
from .checkpoint import load_arrays, save_arrays
from .convlstm import ConvLSTMCell, reshape_clips_to_frames, reshape_frames_to_clips
from .tensor import ShapeError, Tensor

CONFIG_DIR = Path(__file__).parent / "configs"
LAYER_KINDS = ("conv", "relu", "maxpool", "upsample", "convlstm", "reshape", "softmax")
CLASSIFIER = "conv6"
CONVLSTM = "convlstm"


@dataclass
class StageConfig:
    width: int
    convs: int = 2
    kernel: int = 3
    stride: int = 2
    dilation: int = 1


def _default_stages() -> list[StageConfig]:
    return [StageConfig(8), StageConfig(16), StageConfig(32),
            StageConfig(64, stride=1, dilation=2)]


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    num_classes: int = 5
    stages: list[StageConfig] = field(default_factory=_default_stages)
    pool_after_stage: int = 0
    pool_kernel: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__} - {"name", "note"}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d.pop("name", None)
        d.pop("note", None)
        if "stages" in d:
            d["stages"] = [StageConfig(**s) for s in d["stages"]]
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> ModelConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class LayerSpec:
    name: str
    kind: str
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    lr_group: str = ""
    direction: str = ""
    T: int = 1
    peephole: bool = True
    input_scale: float = 1.0  # fixed divisor applied to a convlstm layer's input

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


class ModelGraph:
    """Ordered layers plus a flat parameter store keyed ``"layer/param"``."""

    def __init__(self, layers: list[LayerSpec], params: dict[str, Tensor], num_classes: int,
                 input_size: tuple[int, int], in_channels: int = 3,
                 config: ModelConfig | None = None):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.layers = layers
        self.params = params
        self.num_classes = num_classes
        self.input_size = tuple(input_size)
        self.in_channels = in_channels
        self.config = config
        self._cells: dict[str, ConvLSTMCell] = {}

    # -- introspection --------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def index(self, name: str) -> int:
        return [l.name for l in self.layers].index(name)

    @property
    def has_convlstm(self) -> bool:
        return any(l.kind == "convlstm" for l in self.layers)

    @property
    def clip_length(self) -> int:
        for l in self.layers:
            if l.kind == "reshape" and l.direction == "frames_to_clips":
                return l.T
        return 1

    def param_groups(self) -> dict[str, str]:
        groups = {l.name: l.lr_group for l in self.layers}
        return {n: groups[n.split("/")[0]] for n in self.params}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def shape_trace(self, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape of every layer, computed without touching parameters."""
        n, c, (h, w) = batch, self.in_channels, self.input_size
        t = 1
        clip = False
        out = []
        for l in self.layers:
            if l.kind == "conv":
                h = -(-h // l.stride)
                w = -(-w // l.stride)
                c = l.out_channels
            elif l.kind == "maxpool":
                h = -(-h // l.stride)
                w = -(-w // l.stride)
            elif l.kind == "upsample":
                h, w = self.input_size
            elif l.kind == "convlstm":
                c = l.out_channels
            elif l.kind == "reshape":
                clip = l.direction == "frames_to_clips"
                t = l.T if clip else 1
            shape = (n // t, t, c, h, w) if clip else (n, c, h, w)
            out.append((l.name, shape))
        return out

    def feature_size(self, layer_name: str) -> tuple[int, int]:
        """Spatial size of the input feeding ``layer_name``."""
        trace = self.shape_trace()
        i = self.index(layer_name)
        return self.input_size if i == 0 else tuple(trace[i - 1][1][-2:])

    def cell(self, layer_name: str = CONVLSTM) -> ConvLSTMCell:
        if layer_name not in self._cells:
            l = self.layer(layer_name)
            prefix = f"{layer_name}/"
            params = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
            in_ch = params["W_xi"].shape[1]
            spatial = self.feature_size(layer_name)
            self._cells[layer_name] = ConvLSTMCell(in_ch, l.out_channels, l.kernel, spatial,
                                                   l.peephole, params)
        return self._cells[layer_name]

    # -- execution ----------------------------------------------------------

    def run_layers(self, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        stop = len(self.layers) if stop is None else stop
        for l in self.layers[start:stop]:
            if l.kind == "conv":
                x = ts.conv2d(x, self.params[f"{l.name}/weight"], self.params[f"{l.name}/bias"],
                              stride=l.stride, dilation=l.dilation, padding="same")
            elif l.kind == "relu":
                x = ts.relu(x)
            elif l.kind == "maxpool":
                x = ts.max_pool2d(x, l.kernel, l.stride, padding="same")
            elif l.kind == "upsample":
                x = ts.bilinear_upsample(x, *self.input_size)
            elif l.kind == "reshape":
                x = (reshape_frames_to_clips(x, l.T) if l.direction == "frames_to_clips"
                     else reshape_clips_to_frames(x))
            elif l.kind == "convlstm":
                if l.input_scale != 1.0:
                    x = ts.scale(x, 1.0 / l.input_scale)
                x = self.cell(l.name).sequence(x)
            elif l.kind == "softmax":
                x = ts.softmax_channels(x)
        return x

    def forward(self, batch) -> Tensor:
        x = ts.as_tensor(batch)
        want = (self.in_channels, *self.input_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"forward: batch {x.shape} does not match [*, {want}]")
        if self.has_convlstm and x.shape[0] % self.clip_length:
            raise ShapeError(f"forward: batch of {x.shape[0]} frames is not divisible by "
                             f"T={self.clip_length}")
        return self.run_layers(x)

    __call__ = forward

    def predict(self, batch) -> np.ndarray:
        """Argmax class map ``[N,H,W]`` (no tape)."""
        return self.forward(batch).data.argmax(axis=1)

    def probabilities(self, batch) -> np.ndarray:
        return ts.softmax_channels(self.forward(batch)).data

    # -- persistence ----------------------------------------------------------

    def copy(self) -> ModelGraph:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return ModelGraph(copy.deepcopy(self.layers), params, self.num_classes, self.input_size,
                          self.in_channels, copy.deepcopy(self.config))

    def arch(self) -> dict:
        return {"layers": [asdict(l) for l in self.layers], "num_classes": self.num_classes,
                "input_size": list(self.input_size), "in_channels": self.in_channels,
                "config": self.config.to_dict() if self.config else None}

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        save_arrays(path, {k: v.data for k, v in self.params.items()},
                    {"arch": self.arch(), **(meta or {})})

    @classmethod
    def load(cls, path: str | Path) -> ModelGraph:
        arrays, meta = load_arrays(path)
        return cls.from_arch(meta["arch"], arrays)

    @classmethod
    def from_arch(cls, arch: dict, arrays: dict[str, np.ndarray]) -> ModelGraph:
        layers = [LayerSpec(**l) for l in arch["layers"]]
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        cfg = ModelConfig.from_dict(arch["config"]) if arch.get("config") else None
        return cls(layers, params, arch["num_classes"], tuple(arch["input_size"]),
                   arch["in_channels"], cfg)


def build_mini_fcn(cfg: ModelConfig | None = None, seed: int = 0, materialize: bool = True,
                   ) -> ModelGraph:
    """Conv-ReLU stages (one max-pool) down to /16, a 1x1 ``conv6`` classifier, x16 upsample."""
    cfg = cfg or ModelConfig()
    h, w = cfg.input_size
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} must be divisible by 16")
    total_stride = 2 * math.prod(s.stride for s in cfg.stages)  # the pool halves once
    if total_stride != 16:
        raise ValueError(f"stage strides give an output stride of {total_stride}, expected 16")
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = cfg.in_channels
    for si, st in enumerate(cfg.stages, start=1):
        group = f"stage{si}"
        for j in range(1, st.convs + 1):
            name = f"stage{si}_conv{j}"
            layers.append(LayerSpec(name, "conv", st.width, st.kernel,
                                    st.stride if j == 1 else 1, st.dilation, group))
            layers.append(LayerSpec(f"stage{si}_relu{j}", "relu", lr_group=group))
            shapes[f"{name}/weight"] = (st.width, c_in, st.kernel, st.kernel)
            shapes[f"{name}/bias"] = (st.width,)
            c_in = st.width
        if si - 1 == cfg.pool_after_stage:
            layers.append(LayerSpec(f"pool{si}", "maxpool", kernel=cfg.pool_kernel, stride=2,
                                    lr_group=group))
    layers.append(LayerSpec(CLASSIFIER, "conv", cfg.num_classes, 1, 1, 1, "classifier"))
    shapes[f"{CLASSIFIER}/weight"] = (cfg.num_classes, c_in, 1, 1)
    shapes[f"{CLASSIFIER}/bias"] = (cfg.num_classes,)
    layers.append(LayerSpec("upsample", "upsample", lr_group="classifier"))

    params: dict[str, Tensor] = {}
    if materialize:
        for name, shape in shapes.items():
            if name.endswith("/bias"):
                data = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                relu_gain = 1.0 if name.startswith(CLASSIFIER) else math.sqrt(2.0)
                bound = relu_gain * math.sqrt(3.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
    return ModelGraph(layers, params, cfg.num_classes, cfg.input_size, cfg.in_channels, cfg)


def convert_to_convlstm_fcn(m: ModelGraph, T: int, peephole: bool = True,
                            seed_from_classifier: bool = True, seed: int = 0,
                            logit_scale: float = 1.0, open_bias: float = 3.0,
                            forget_bias: float = 0.0, input_bias: float | None = None) -> ModelGraph:
    """Replace ``conv6`` by reshape -> 1x1 ConvLSTM (hidden = C) -> reshape.

    Every other parameter is copied unchanged. With ``seed_from_classifier``
    the candidate kernel and bias take the classifier's values, every other
    kernel starts at zero, the output gate bias is ``open_bias``, the forget
    gate bias is ``forget_bias`` and the input gate bias is ``input_bias``
    (``open_bias`` when None). The initial output is then a monotone
    per-class function of a running average of the old logits.
    ``logit_scale`` divides the layer's input (a fixed constant, not a
    parameter) so typical logits land in the near-linear range of tanh and
    gate pre-activations stay moderate as the gate kernels move.
    """
    if logit_scale <= 0:
        raise ValueError("logit_scale must be positive")
    if T < 1:
        raise ValueError("T must be >= 1")
    try:
        idx = m.index(CLASSIFIER)
    except ValueError:
        raise ValueError(f"model has no classifier layer {CLASSIFIER!r}") from None
    spatial = m.feature_size(CLASSIFIER)
    w6 = m.params[f"{CLASSIFIER}/weight"].data
    b6 = m.params[f"{CLASSIFIER}/bias"].data
    n_cls, c_in = w6.shape[:2]
    cell = ConvLSTMCell(c_in, n_cls, 1, spatial, peephole).init(np.random.default_rng(seed))
    if seed_from_classifier:
        for k, p in cell.params.items():
            if k.startswith("W_"):
                p.data[...] = 0.0
        cell.params["W_xc"].data[...] = w6
        cell.params["b_c"].data[...] = b6 / logit_scale
        cell.params["b_i"].data[...] = open_bias if input_bias is None else input_bias
        cell.params["b_f"].data[...] = forget_bias
        cell.params["b_o"].data[...] = open_bias

    new_layers = copy.deepcopy(m.layers[:idx]) + [
        LayerSpec("reshape1", "reshape", direction="frames_to_clips", T=T, lr_group=CONVLSTM),
        LayerSpec(CONVLSTM, "convlstm", n_cls, 1, lr_group=CONVLSTM, peephole=peephole,
                  input_scale=float(logit_scale)),
        LayerSpec("reshape2", "reshape", direction="clips_to_frames", T=T, lr_group=CONVLSTM),
    ] + copy.deepcopy(m.layers[idx + 1:])
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k)
              for k, v in m.params.items() if not k.startswith(f"{CLASSIFIER}/")}
    for k, v in cell.params.items():
        params[f"{CONVLSTM}/{k}"] = Tensor(v.data, requires_grad=True, name=f"{CONVLSTM}/{k}")
    return ModelGraph(new_layers, params, m.num_classes, m.input_size, m.in_channels,
                      copy.deepcopy(m.config))


def forward(m: ModelGraph, batch) -> Tensor:
    return m.forward(batch)
