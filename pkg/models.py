"""Saliency network: VGG-16 style encoder, transpose-convolution decoder,
1x1 sigmoid head. Parameters live in a ``ParamStore``; the network object
itself only holds the architecture.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

import tensor_core as tc
from autograd import EAGER, Var
from errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 32
NUM_STAGES = 5
DEFAULT_ENCODER_STAGES = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
DEFAULT_DECODER_WIDTHS = (256, 128, 64, 32, 16)
CONV3 = tc.Conv2dSpec(3, 3, stride=1, padding=1)
CONV1 = tc.Conv2dSpec(1, 1, stride=1, padding=0)
TCONV = tc.TransposeConv2dSpec()


@dataclass(frozen=True)
class DecoderStage:
    width: int
    batch_norm: bool = True
    activation: bool = True


def _default_decoder():
    return tuple(DecoderStage(w) for w in DEFAULT_DECODER_WIDTHS)


@dataclass(frozen=True)
class ModelConfig:
    encoder_stages: tuple = DEFAULT_ENCODER_STAGES
    encoder_pool_kind: str = "average"
    decoder_stages: tuple = field(default_factory=_default_decoder)
    channel_scale: float = 1.0
    # scaled decoder widths never drop below this
    decoder_min_width: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.encoder_stages) != NUM_STAGES:
            raise ConfigurationError(f"need exactly {NUM_STAGES} stages", field="encoder_stages")
        if len(self.decoder_stages) != NUM_STAGES:
            raise ConfigurationError(f"need exactly {NUM_STAGES} stages", field="decoder_stages")
        if self.encoder_pool_kind not in ("average", "max"):
            raise ConfigurationError(f"unknown pooling kind {self.encoder_pool_kind!r}", field="encoder_pool_kind")
        if not self.channel_scale > 0:
            raise ConfigurationError("must be positive", field="channel_scale")
        if self.decoder_min_width < 1:
            raise ConfigurationError("must be >= 1", field="decoder_min_width")
        for count, width in self.encoder_stages:
            if count < 1 or width < 1:
                raise ConfigurationError("conv count and width must be >= 1", field="encoder_stages")
        for stage in self.decoder_stages:
            if stage.width < 1:
                raise ConfigurationError("width must be >= 1", field="decoder_stages")

    def scaled(self, width):
        return max(1, int(round(width * self.channel_scale)))

    @property
    def encoder_widths(self):
        return [self.scaled(width) for _, width in self.encoder_stages]

    @property
    def decoder_widths(self):
        return [max(self.decoder_min_width, self.scaled(s.width)) for s in self.decoder_stages]

    def with_batch_norm(self, enabled):
        return replace(self, decoder_stages=tuple(replace(s, batch_norm=enabled) for s in self.decoder_stages))

    def to_text(self):
        lines = [
            "encoder_stages=" + ",".join(f"{c}x{w}" for c, w in self.encoder_stages),
            f"encoder_pool_kind={self.encoder_pool_kind}",
            "decoder_widths=" + ",".join(str(s.width) for s in self.decoder_stages),
            "decoder_batch_norm=" + ",".join(str(int(s.batch_norm)) for s in self.decoder_stages),
            "decoder_activation=" + ",".join(str(int(s.activation)) for s in self.decoder_stages),
            f"channel_scale={self.channel_scale!r}",
            f"decoder_min_width={self.decoder_min_width}",
        ]
        return "\n".join(lines)

    @classmethod
    def from_mapping(cls, values):
        try:
            encoder = tuple(
                tuple(int(part) for part in item.split("x")) for item in values["encoder_stages"].split(",")
            )
            widths = [int(v) for v in values["decoder_widths"].split(",")]
            bn = [v == "1" for v in values["decoder_batch_norm"].split(",")]
            act = [v == "1" for v in values["decoder_activation"].split(",")]
            decoder = tuple(DecoderStage(w, b, a) for w, b, a in zip(widths, bn, act))
            return cls(
                encoder_stages=encoder,
                encoder_pool_kind=values["encoder_pool_kind"],
                decoder_stages=decoder,
                channel_scale=float(values["channel_scale"]),
                decoder_min_width=int(values["decoder_min_width"]),
            )
        except (KeyError, ValueError) as e:
            raise ConfigurationError(f"cannot parse model config: {e}", field="model_config") from e


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray
    frozen: bool = False
    # running statistics are stored here but never touched by the optimizer
    trainable: bool = True


class ParamStore:
    """Ordered name -> (value, gradient, frozen) map."""

    def __init__(self):
        self._entries = {}

    def add(self, name, value, frozen=False, trainable=True):
        value = np.ascontiguousarray(value, dtype=np.float32)
        self._entries[name] = Parameter(value, np.zeros_like(value), frozen, trainable)

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self, prefix=""):
        return [name for name in self._entries if name.startswith(prefix)]

    def value(self, name):
        return self._entries[name].value

    def values(self):
        return {name: p.value for name, p in self._entries.items()}

    def set_value(self, name, value):
        entry = self._entries[name]
        value = np.asarray(value, dtype=np.float32)
        if value.shape != entry.value.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {entry.value.shape}", axis="shape")
        entry.value = np.ascontiguousarray(value)

    def trainable_names(self):
        return [name for name, p in self._entries.items() if p.trainable]

    def frozen_names(self):
        return [name for name, p in self._entries.items() if p.frozen]

    def zero_grad(self):
        for p in self._entries.values():
            p.grad = np.zeros_like(p.value)

    def set_grads(self, grads):
        for name, grad in grads.items():
            if name not in self._entries:
                continue
            entry = self._entries[name]
            if grad.shape != entry.value.shape:
                raise DimensionError(f"{name}: gradient shape {grad.shape} != {entry.value.shape}", axis="shape")
            entry.grad = np.asarray(grad, dtype=np.float32)

    def parameter_count(self):
        return int(sum(p.value.size for p in self._entries.values() if p.trainable))

    def copy(self):
        clone = ParamStore()
        for name, p in self._entries.items():
            clone._entries[name] = Parameter(p.value.copy(), p.grad.copy(), p.frozen, p.trainable)
        return clone


class SaliencyNet:
    """Fully convolutional encoder-decoder; any input size works."""

    def __init__(self, config):
        config.validate()
        self.config = config
        self.pool = tc.Pool2dSpec(config.encoder_pool_kind)

    def parameter_shapes(self):
        shapes = []
        c_in = 3
        for i, ((count, _), width) in enumerate(zip(self.config.encoder_stages, self.config.encoder_widths), 1):
            for j in range(1, count + 1):
                shapes.append((f"encoder.stage{i}.conv{j}.weight", (width, c_in, 3, 3), "conv", c_in * 9))
                shapes.append((f"encoder.stage{i}.conv{j}.bias", (width,), "zero", None))
                c_in = width
        for i, (stage, width) in enumerate(zip(self.config.decoder_stages, self.config.decoder_widths), 1):
            shapes.append((f"decoder.stage{i}.tconv.weight", (c_in, width, 2, 2), "conv", c_in))
            shapes.append((f"decoder.stage{i}.tconv.bias", (width,), "zero", None))
            if stage.batch_norm:
                shapes.append((f"decoder.stage{i}.bn.gamma", (width,), "one", None))
                shapes.append((f"decoder.stage{i}.bn.beta", (width,), "zero", None))
                shapes.append((f"decoder.stage{i}.bn.running_mean", (width,), "buffer_zero", None))
                shapes.append((f"decoder.stage{i}.bn.running_var", (width,), "buffer_one", None))
            c_in = width
        shapes.append(("head.conv.weight", (1, c_in, 1, 1), "conv", c_in))
        shapes.append(("head.conv.bias", (1,), "zero", None))
        return shapes

    def init_params(self, seed=0):
        """He-uniform weights, zero biases, unit gamma."""
        rng = np.random.default_rng(seed)
        params = ParamStore()
        for name, shape, kind, fan_in in self.parameter_shapes():
            if kind == "conv":
                limit = np.sqrt(6.0 / fan_in)
                params.add(name, rng.uniform(-limit, limit, size=shape))
            elif kind == "one":
                params.add(name, np.ones(shape))
            elif kind == "buffer_one":
                params.add(name, np.ones(shape), trainable=False)
            elif kind == "buffer_zero":
                params.add(name, np.zeros(shape), trainable=False)
            else:
                params.add(name, np.zeros(shape))
        return params

    def encode(self, values, x, ops=EAGER, shapes=None):
        for i, (count, _) in enumerate(self.config.encoder_stages, 1):
            for j in range(1, count + 1):
                prefix = f"encoder.stage{i}.conv{j}"
                x = ops.conv2d(x, ops.leaf(f"{prefix}.weight", values[f"{prefix}.weight"]),
                               ops.leaf(f"{prefix}.bias", values[f"{prefix}.bias"]), CONV3)
                x = ops.relu(x)
            x = ops.pool2d(x, self.pool)
            if shapes is not None:
                shapes.append((f"encoder.stage{i}", _shape(x)))
        return x

    def decode(self, values, x, mode, ops=EAGER, stats=None, shapes=None):
        for i, stage in enumerate(self.config.decoder_stages, 1):
            prefix = f"decoder.stage{i}"
            x = ops.transpose_conv2d(x, ops.leaf(f"{prefix}.tconv.weight", values[f"{prefix}.tconv.weight"]),
                                     ops.leaf(f"{prefix}.tconv.bias", values[f"{prefix}.tconv.bias"]), TCONV)
            if stage.batch_norm:
                x, new_mean, new_var = ops.batch_norm(
                    x,
                    ops.leaf(f"{prefix}.bn.gamma", values[f"{prefix}.bn.gamma"]),
                    ops.leaf(f"{prefix}.bn.beta", values[f"{prefix}.bn.beta"]),
                    _raw(values[f"{prefix}.bn.running_mean"]),
                    _raw(values[f"{prefix}.bn.running_var"]),
                    mode,
                )
                if stats is not None and mode == "train":
                    stats[f"{prefix}.bn.running_mean"] = new_mean
                    stats[f"{prefix}.bn.running_var"] = new_var
            if stage.activation:
                x = ops.relu(x)
            if shapes is not None:
                shapes.append((prefix, _shape(x)))
        x = ops.conv2d(x, ops.leaf("head.conv.weight", values["head.conv.weight"]),
                       ops.leaf("head.conv.bias", values["head.conv.bias"]), CONV1)
        return ops.sigmoid(x)

    def forward(self, params, images, mode="infer", ops=EAGER, stats=None, shapes=None):
        """Saliency map (N, 1, H, W) for images (N, 3, H, W).

        Inputs whose sides are not multiples of 32 are edge-padded up to the
        next multiple and the map is cropped back. In train mode, updated
        batch-norm running statistics are written into ``stats`` if given.
        """
        values = params.values() if isinstance(params, ParamStore) else params
        raw = _raw(images)
        if raw.ndim != 4:
            raise DimensionError(f"images must be 4-D, got shape {raw.shape}", axis="rank")
        if raw.shape[1] != 3:
            raise DimensionError(f"images must have 3 channels, got {raw.shape[1]}", axis="channels")
        height, width = raw.shape[2], raw.shape[3]
        padded = tc.pad_edge(raw, DOWNSAMPLE_FACTOR)
        x = images if padded is raw else ops.constant(padded)
        features = self.encode(values, x, ops, shapes)
        saliency = self.decode(values, features, mode, ops, stats, shapes)
        return ops.crop(saliency, height, width)


def _raw(value):
    return value.value if isinstance(value, Var) else value


def _shape(x):
    return tuple(np.shape(_raw(x)))


def build_model(config=None, seed=0):
    config = config or ModelConfig()
    model = SaliencyNet(config)
    params = model.init_params(seed)
    logger.info(
        "Built saliency model: encoder widths %s (%s pooling), decoder widths %s, %d trainable values",
        config.encoder_widths, config.encoder_pool_kind, config.decoder_widths, params.parameter_count(),
    )
    return model, params


def forward(model, params, images, mode="infer"):
    return model.forward(params, images, mode)


def freeze_encoder(params):
    for name in params.names("encoder."):
        params[name].frozen = True
    logger.info("Froze %d encoder tensors", len(params.names("encoder.")))


def vgg16_name_map(config=None):
    """``conv{stage}_{index}.weight|bias`` -> ParamStore encoder names."""
    config = config or ModelConfig()
    mapping = {}
    for i, (count, _) in enumerate(config.encoder_stages, 1):
        for j in range(1, count + 1):
            for kind in ("weight", "bias"):
                mapping[f"conv{i}_{j}.{kind}"] = f"encoder.stage{i}.conv{j}.{kind}"
    return mapping


@dataclass
class ImportReport:
    matched: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    conflicts: list = field(default_factory=list)

    def summary(self):
        return (
            f"{len(self.matched)} matched, {len(self.conflicts)} shape conflicts, "
            f"{len(self.skipped)} skipped, {len(self.missing)} missing"
        )


def import_weights(params, container_path, name_map=None):
    """Copy tensors from an FCNW1 container into ``params`` where shapes agree.

    ``name_map`` translates container names to ParamStore names; names it does
    not cover are used as-is. Nothing is reshaped: mismatches are reported.
    """
    from storage import read_container

    entries = read_container(container_path)
    name_map = name_map or {}
    report = ImportReport()
    filled = set()
    for external, tensor in entries.items():
        if isinstance(tensor, str):
            report.skipped.append(external)
            continue
        name = name_map.get(external, external)
        if name not in params:
            report.skipped.append(external)
            continue
        expected = params.value(name).shape
        if tensor.shape != expected:
            report.conflicts.append((name, expected, tensor.shape))
            continue
        params.set_value(name, tensor)
        report.matched.append(name)
        filled.add(name)
    report.missing = [name for name in params if name not in filled and params[name].trainable]
    logger.info("Imported weights from %s: %s", container_path, report.summary())
    for name, expected, got in report.conflicts:
        logger.warning("Shape conflict for %s: expected %s, container has %s", name, expected, got)
    return report
