"""Context-aware generator: a per-slice U-net followed by a slice-axis context block."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, DimensionError
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module, fan_in_uniform
from .schemas import GeneratorConfig
from .tensorcore import Tensor

logger = logging.getLogger("hpalf")

REPORTED_FULL_SCALE_PARAMETERS = 217_900_000
REFINE_CLIP = 1.0 - 1e-3


def _zero(module: Conv2d) -> Conv2d:
    module.weight.data[...] = 0.0
    module.bias.data[...] = 0.0
    return module


class UNet(Module):
    """Stride-2 encoder/decoder with concatenated skips; slices travel along the batch axis."""

    def __init__(
        self, config: GeneratorConfig, rng: np.random.Generator, *, in_channels: int = 1, out_channels: int = 1
    ) -> None:
        super().__init__()
        self.slope = config.leaky_slope
        encoder = config.encoder_widths()
        decoder = config.decoder_widths()
        self.skip_widths = encoder
        self.down: list[Conv2d] = []
        self.down_norms: list[BatchNorm2d | None] = []
        previous = in_channels
        for level, width in enumerate(encoder):
            self.down.append(Conv2d(previous, width, rng, kernel=3, stride=2, padding=1))
            self.down_norms.append(BatchNorm2d(width) if level > 0 else None)
            previous = width

        self.up: list[ConvTranspose2d] = []
        self.up_norms: list[BatchNorm2d] = []
        channels = encoder[-1]
        for step, width in enumerate(decoder):
            skip = self._skip_level(step)
            out = max(1, width - encoder[skip]) if skip >= 0 else width
            self.up.append(ConvTranspose2d(channels, out, rng, kernel=3, stride=2, padding=1, output_padding=1))
            self.up_norms.append(BatchNorm2d(out))
            channels = out + (encoder[skip] if skip >= 0 else 0)
        self.head = _zero(Conv2d(channels, out_channels, rng))

    def _skip_level(self, step: int) -> int:
        return len(self.skip_widths) - 2 - step

    def __call__(self, x: Tensor) -> Tensor:
        skips: list[Tensor] = []
        h = x
        for conv, norm in zip(self.down, self.down_norms):
            h = conv(h)
            if norm is not None:
                h = norm(h)
            h = tc.leaky_relu(h, self.slope)
            skips.append(h)
        for step, (deconv, norm) in enumerate(zip(self.up, self.up_norms)):
            h = tc.leaky_relu(norm(deconv(h)), self.slope)
            level = self._skip_level(step)
            if level >= 0:
                h = tc.concat([h, skips[level]], axis=1)
        return self.head(h)


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor


class ConvLSTMCell(Module):
    """Peephole ConvLSTM; the four gates share one input and one hidden convolution."""

    def __init__(self, in_channels: int, channels: int, image_size: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.channels = channels
        self.w_x = Conv2d(in_channels, 4 * channels, rng)
        fan_in = channels * 9
        self.w_h = Tensor(fan_in_uniform(rng, (4 * channels, channels, 3, 3), fan_in), requires_grad=True, name="w_h")
        shape = (channels, image_size, image_size)
        self.w_ci = Tensor(np.zeros(shape), requires_grad=True, name="w_ci")
        self.w_cf = Tensor(np.zeros(shape), requires_grad=True, name="w_cf")
        self.w_co = Tensor(np.zeros(shape), requires_grad=True, name="w_co")

    def initial_state(self, batch: int, height: int, width: int) -> LstmState:
        zeros = np.zeros((batch, self.channels, height, width))
        return LstmState(hidden=Tensor(zeros), cell=Tensor(zeros))

    def step(self, x: Tensor, state: LstmState) -> LstmState:
        if x.shape[2:] != state.hidden.shape[2:] or x.shape[0] != state.hidden.shape[0]:
            raise DimensionError(f"input {x.shape} does not match state {state.hidden.shape}")
        if x.shape[2:] != self.w_ci.shape[1:]:
            raise DimensionError(f"input extent {x.shape[2:]} does not match peephole extent {self.w_ci.shape[1:]}")
        c = self.channels
        gates = self.w_x(x) + tc.conv2d(state.hidden, self.w_h, None, 1, 1)
        i = tc.sigmoid(gates[:, 0:c] + self.w_ci * state.cell)
        f = tc.sigmoid(gates[:, c : 2 * c] + self.w_cf * state.cell)
        cell = f * state.cell + i * tc.tanh(gates[:, 2 * c : 3 * c])
        o = tc.sigmoid(gates[:, 3 * c : 4 * c] + self.w_co * cell)
        return LstmState(hidden=o * tc.tanh(cell), cell=cell)


def convlstm_cell_step(x: Tensor, state: LstmState, cell: ConvLSTMCell) -> LstmState:
    return cell.step(x, state)


class BiConvLSTM(Module):
    """Runs one shared cell forwards and backwards over the slices and fuses both hidden states."""

    def __init__(self, in_channels: int, channels: int, image_size: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.cell = ConvLSTMCell(in_channels, channels, image_size, rng)
        fan_in = channels * 9
        self.w_forward = Tensor(
            fan_in_uniform(rng, (channels, channels, 3, 3), fan_in), requires_grad=True, name="w_forward"
        )
        self.w_backward = Tensor(
            fan_in_uniform(rng, (channels, channels, 3, 3), fan_in), requires_grad=True, name="w_backward"
        )
        self.bias = Tensor(fan_in_uniform(rng, (channels,), fan_in), requires_grad=True, name="bias")

    def run(self, frames: list[Tensor]) -> list[Tensor]:
        batch, _, height, width = frames[0].shape
        forward, backward = [], []
        state = self.cell.initial_state(batch, height, width)
        for frame in frames:
            state = self.cell.step(frame, state)
            forward.append(state.hidden)
        state = self.cell.initial_state(batch, height, width)
        for frame in reversed(frames):
            state = self.cell.step(frame, state)
            backward.append(state.hidden)
        backward.reverse()
        return [
            tc.tanh(tc.conv2d(fwd, self.w_forward, None, 1, 1) + tc.conv2d(bwd, self.w_backward, self.bias, 1, 1))
            for fwd, bwd in zip(forward, backward)
        ]


def biconvlstm_forward(sequence: Tensor, block: BiConvLSTM) -> Tensor:
    """(n, C, H, W) sequence in, (n, C', H, W) fused outputs out."""
    frames = [sequence[t : t + 1] for t in range(sequence.shape[0])]
    return tc.concat(block.run(frames), axis=0)


class RecurrentContext(Module):
    """Lift each slice to feature channels, run the Bi-ConvLSTM, project back to one channel."""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        c = config.lstm_channels
        self.lift = Conv2d(1, c, rng)
        self.lstm = BiConvLSTM(c, c, config.image_size, rng)
        self.project = _zero(Conv2d(c, 1, rng))
        self.hidden: np.ndarray | None = None

    def __call__(self, xhat: Tensor) -> Tensor:
        batch, n, height, width = xhat.shape
        lifted = self.lift(tc.reshape(xhat, (batch * n, 1, height, width)))
        lifted = tc.reshape(lifted, (batch, n, -1, height, width))
        outputs = self.lstm.run([lifted[:, t] for t in range(n)])
        self.hidden = np.stack([y.data for y in outputs], axis=1)
        residual = [self.project(y) for y in outputs]
        return tc.reshape(tc.stack(residual, axis=1), (batch, n, height, width))


class SliceStackContext(Module):
    """2D CNN context: slices stacked as channels."""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.slope = config.leaky_slope
        self.mix = Conv2d(config.n_slices, config.lstm_channels, rng)
        self.project = _zero(Conv2d(config.lstm_channels, config.n_slices, rng))
        self.hidden: np.ndarray | None = None

    def __call__(self, xhat: Tensor) -> Tensor:
        h = tc.leaky_relu(self.mix(xhat), self.slope)
        self.hidden = h.data[:, None]
        return self.project(h)


class StencilContext(Module):
    """3D CNN context: a depth-3 stencil assembled from per-slice 2D convolutions."""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        c = config.lstm_channels
        self.slope = config.leaky_slope
        self.lift = Conv2d(1, c, rng)
        fan_in = 3 * c * 9
        self.w_previous = Tensor(fan_in_uniform(rng, (c, c, 3, 3), fan_in), requires_grad=True, name="w_previous")
        self.current = Conv2d(c, c, rng)
        self.w_next = Tensor(fan_in_uniform(rng, (c, c, 3, 3), fan_in), requires_grad=True, name="w_next")
        self.project = _zero(Conv2d(c, 1, rng))
        self.hidden: np.ndarray | None = None

    def __call__(self, xhat: Tensor) -> Tensor:
        batch, n, height, width = xhat.shape
        lifted = tc.leaky_relu(self.lift(tc.reshape(xhat, (batch * n, 1, height, width))), self.slope)
        lifted = tc.reshape(lifted, (batch, n, -1, height, width))
        frames = [lifted[:, t] for t in range(n)]
        outputs = []
        for t in range(n):
            h = self.current(frames[t])
            if t > 0:
                h = h + tc.conv2d(frames[t - 1], self.w_previous, None, 1, 1)
            if t < n - 1:
                h = h + tc.conv2d(frames[t + 1], self.w_next, None, 1, 1)
            outputs.append(tc.leaky_relu(h, self.slope))
        self.hidden = np.stack([h.data for h in outputs], axis=1)
        residual = [self.project(h) for h in outputs]
        return tc.reshape(tc.stack(residual, axis=1), (batch, n, height, width))


def _refine_base(x: Tensor) -> Tensor:
    """atanh of the clipped input, so tanh(base) reproduces the zero-filled slices."""
    clipped = np.clip(x.data, -REFINE_CLIP, REFINE_CLIP)
    inside = (np.abs(x.data) <= REFINE_CLIP).astype(x.data.dtype)
    return tc.custom_op("refine_base", (x,), np.arctanh(clipped), lambda g: (g * inside / (1.0 - clipped**2),))


class Generator(Module):
    """x_rec = tanh(x_hat + context(x_hat)); with ``refine_input`` x_hat also carries atanh of the input."""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        if config.context == "none":
            self.unet = UNet(config, rng, in_channels=config.n_slices, out_channels=config.n_slices)
            self.context = None
        else:
            self.unet = UNet(config, rng)
            blocks = {"biconvlstm": RecurrentContext, "2dcnn": SliceStackContext, "3dcnn": StencilContext}
            self.context = blocks[config.context](config, rng)

    def _check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.n_slices or x.shape[2] != c.image_size or x.shape[3] != c.image_size:
            raise ConfigurationError(
                f"generator expects (batch, {c.n_slices}, {c.image_size}, {c.image_size}), got {x.shape}"
            )

    def unet_forward(self, x: Tensor) -> Tensor:
        """Shared-weight U-net estimate for every slice, slices along the batch axis."""
        self._check_input(x)
        batch, n, height, width = x.shape
        if self.context is None:
            body = self.unet(x)
        else:
            body = tc.reshape(self.unet(tc.reshape(x, (batch * n, 1, height, width))), (batch, n, height, width))
        return body

    def __call__(self, x: Tensor) -> Tensor:
        xhat = self.unet_forward(x)
        if self.config.refine_input:
            xhat = _refine_base(x) + xhat
        if self.context is None:
            return tc.tanh(xhat)
        return tc.tanh(xhat + self.context(xhat))

    def context_features(self) -> np.ndarray | None:
        """Context-block hidden maps from the last forward, shaped (batch, n, C, H, W)."""
        return None if self.context is None else self.context.hidden


def _conv_count(cin: int, cout: int, *, bias: bool = True) -> int:
    return cout * cin * 9 + (cout if bias else 0)


def _unet_count(config: GeneratorConfig, in_channels: int, out_channels: int) -> int:
    encoder, decoder = config.encoder_widths(), config.decoder_widths()
    total, previous = 0, in_channels
    for level, width in enumerate(encoder):
        total += _conv_count(previous, width) + (2 * width if level > 0 else 0)
        previous = width
    channels = encoder[-1]
    for step, width in enumerate(decoder):
        skip = len(encoder) - 2 - step
        out = max(1, width - encoder[skip]) if skip >= 0 else width
        total += _conv_count(channels, out) + 2 * out
        channels = out + (encoder[skip] if skip >= 0 else 0)
    return total + _conv_count(channels, out_channels)


def count_parameters(config: GeneratorConfig) -> int:
    """Trainable parameter count computed from the configuration alone."""
    c, n, size = config.lstm_channels, config.n_slices, config.image_size
    if config.context == "none":
        return _unet_count(config, n, n)
    total = _unet_count(config, 1, 1)
    if config.context == "biconvlstm":
        cell = _conv_count(c, 4 * c) + _conv_count(c, 4 * c, bias=False) + 3 * c * size * size
        fusion = 2 * _conv_count(c, c, bias=False) + c
        total += _conv_count(1, c) + cell + fusion + _conv_count(c, 1)
    elif config.context == "2dcnn":
        total += _conv_count(n, c) + _conv_count(c, n)
    elif config.context == "3dcnn":
        total += _conv_count(1, c) + _conv_count(c, c) + 2 * _conv_count(c, c, bias=False) + _conv_count(c, 1)
    return total


def describe(config: GeneratorConfig) -> dict[str, object]:
    count = count_parameters(config)
    logger.info(
        "Generator %s: %s parameters (full-scale reference %s), encoder %s, decoder %s",
        config.context,
        f"{count:,}",
        f"{REPORTED_FULL_SCALE_PARAMETERS:,}",
        config.encoder_widths(),
        config.decoder_widths(),
    )
    return {
        "parameters": count,
        "reference_parameters": REPORTED_FULL_SCALE_PARAMETERS,
        "encoder_widths": config.encoder_widths(),
        "decoder_widths": config.decoder_widths(),
        "context": config.context,
    }
