"""
Convolutional Autoencoder
Bias-free encoder/decoder construction, reconstruction loss, denoising corruption and weight transfer
"""

import logging
from functools import reduce
from typing import List, Optional, Tuple, Union

import numpy as np

from exceptions import ConfigError, ShapeError
from models import AutoencoderHyperParams, NetSpec, NetworkParams
from ndgrad import (
    AdamState,
    Tensor,
    adam_step,
    add,
    backward,
    check_finite,
    conv2d,
    dense,
    leaky_relu,
    mse,
    reshape,
    scale,
    tconv2d,
    tconv_output_size,
    xavier_init,
)

logger = logging.getLogger(__name__)


def encoder_layer_names(spec: NetSpec) -> List[str]:
    return [f"conv{i}" for i in range(1, len(spec.conv_channels) + 1)] + ["fc"]


def decoder_layer_names(spec: NetSpec) -> List[str]:
    return ["fc"] + [f"tconv{i}" for i in range(len(spec.conv_channels), 0, -1)]


def output_paddings(spec: NetSpec) -> List[int]:
    """Extra rows/cols per tconv layer (tconv1 first) so the decoder mirrors the input size exactly"""
    sizes = spec.spatial_sizes()
    paddings = []
    for layer in range(1, len(spec.conv_channels) + 1):
        target = sizes[layer - 1][0]
        produced = tconv_output_size(sizes[layer][0], spec.kernel, spec.stride, spec.padding)
        target_w = sizes[layer - 1][1]
        produced_w = tconv_output_size(sizes[layer][1], spec.kernel, spec.stride, spec.padding)
        extra = target - produced
        if extra != target_w - produced_w or not 0 <= extra < spec.stride:
            raise ConfigError(f"decoder cannot mirror input size {sizes[layer - 1]} at layer {layer}")
        paddings.append(extra)
    return paddings


def build_encoder(spec: NetSpec, rng: np.random.Generator, dtype=np.float64) -> NetworkParams:
    spec.validate()
    channels = [spec.input_shape[0]] + spec.conv_channels
    encoder = NetworkParams()
    for i in range(1, len(channels)):
        name = f"conv{i}"
        encoder.add(name, xavier_init((channels[i], channels[i - 1], spec.kernel, spec.kernel), rng, dtype, name))
    encoder.add("fc", xavier_init((spec.flat_dim, spec.latent_dim), rng, dtype, "fc"))
    return encoder


def build_decoder(spec: NetSpec, rng: np.random.Generator, dtype=np.float64) -> NetworkParams:
    spec.validate()
    channels = [spec.input_shape[0]] + spec.conv_channels
    decoder = NetworkParams()
    decoder.add("fc", xavier_init((spec.latent_dim, spec.flat_dim), rng, dtype, "fc"))
    for i in range(len(channels) - 1, 0, -1):
        name = f"tconv{i}"
        decoder.add(name, xavier_init((channels[i], channels[i - 1], spec.kernel, spec.kernel), rng, dtype, name))
    return decoder


def build_cae(spec: NetSpec, rng: np.random.Generator, dtype=np.float64) -> Tuple[NetworkParams, NetworkParams]:
    """Xavier-initialized (encoder, decoder) pair for the given topology"""
    encoder = build_encoder(spec, rng, dtype)
    decoder = build_decoder(spec, rng, dtype)
    logger.debug(
        "Built CAE %s -> %d: encoder %d weights, decoder %d weights",
        spec.input_shape,
        spec.latent_dim,
        encoder.n_weights,
        decoder.n_weights,
    )
    return encoder, decoder


def encode(encoder: NetworkParams, x: Tensor, spec: NetSpec) -> Tensor:
    """phi(x; W): conv layers with leaky ReLU, then a linear projection to the latent space"""
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"encoder expects (n, {', '.join(map(str, spec.input_shape))}), got {x.shape}")
    h = x
    for i in range(1, len(spec.conv_channels) + 1):
        h = leaky_relu(conv2d(h, encoder[f"conv{i}"], spec.stride, spec.padding), spec.leaky_slope)
    h = reshape(h, (x.shape[0], spec.flat_dim))
    return dense(h, encoder["fc"])


def decode(decoder: NetworkParams, z: Tensor, spec: NetSpec) -> Tensor:
    if z.ndim != 2 or z.shape[1] != spec.latent_dim:
        raise ShapeError(f"decoder expects (n, {spec.latent_dim}), got {z.shape}")
    height, width = spec.spatial_sizes()[-1]
    paddings = output_paddings(spec)
    h = leaky_relu(dense(z, decoder["fc"]), spec.leaky_slope)
    h = reshape(h, (z.shape[0], spec.conv_channels[-1], height, width))
    for i in range(len(spec.conv_channels), 0, -1):
        h = tconv2d(h, decoder[f"tconv{i}"], spec.stride, spec.padding, paddings[i - 1])
        if i > 1:
            h = leaky_relu(h, spec.leaky_slope)
    return h


def cae_loss(
    encoder: NetworkParams,
    decoder: NetworkParams,
    batch: Tensor,
    spec: NetSpec,
    target: Optional[Tensor] = None,
) -> Tensor:
    """Pixel-wise reconstruction error; `target` is the clean batch when the input is corrupted"""
    reconstruction = decode(decoder, encode(encoder, batch, spec), spec)
    # the target is a constant of the loss
    return mse(reconstruction, (batch if target is None else target).detach())


def dae_corrupt(
    batch: Union[Tensor, np.ndarray], noise_sigma: float, rng: np.random.Generator
) -> Union[Tensor, np.ndarray]:
    """batch + N(0, sigma^2) elementwise, no clipping

    The corrupted batch goes to the encoder, the clean one stays the loss target.
    """
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    values = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if noise_sigma == 0:
        corrupted = values.copy()
    else:
        corrupted = (values + rng.normal(0.0, noise_sigma, size=values.shape)).astype(values.dtype)
    return Tensor(corrupted) if isinstance(batch, Tensor) else corrupted


def transfer_encoder(pretrained: NetworkParams, spec: NetSpec) -> NetworkParams:
    """Deep copy of the encoder weights; decoder layers are left behind"""
    names = encoder_layer_names(spec)
    missing = [name for name in names if name not in pretrained]
    if missing:
        raise ConfigError(f"pretrained network lacks encoder layer(s) {missing}")
    return pretrained.copy(names)


def train_autoencoder(
    encoder: NetworkParams,
    decoders: List[NetworkParams],
    views: np.ndarray,
    spec: NetSpec,
    hp: AutoencoderHyperParams,
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
) -> List[float]:
    """Pretrain with Adam on shuffled mini-batches

    `views` has shape (n, V, C, H, W): input v of every sample is reconstructed
    by decoders[v] and the batch loss is the mean of the V reconstruction errors.
    Returns the mean loss per epoch.
    """
    hp.validate()
    if views.ndim != 5 or views.shape[1] != len(decoders):
        raise ShapeError(f"need views of shape (n, {len(decoders)}, C, H, W), got {views.shape}")
    n = views.shape[0]
    if n == 0:
        raise ShapeError("no samples to pretrain on")
    dtype = encoder[encoder.names()[0]].data.dtype
    encoder_state = AdamState(lr=hp.lr)
    decoder_states = [AdamState(lr=hp.lr) for _ in decoders]
    history: List[float] = []
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        batches = 0
        for start in range(0, n, hp.batch_size):
            index = order[start : start + hp.batch_size]
            encoder.zero_grad()
            for decoder in decoders:
                decoder.zero_grad()
            losses = []
            for v, decoder in enumerate(decoders):
                clean = views[index, v].astype(dtype)
                noisy = dae_corrupt(clean, noise_sigma, rng) if noise_sigma > 0 else clean
                losses.append(cae_loss(encoder, decoder, Tensor(noisy), spec, target=Tensor(clean)))
            loss = losses[0] if len(losses) == 1 else scale(reduce(add, losses), 1.0 / len(losses))
            backward(loss)
            adam_step(encoder, encoder_state, hp.weight_decay)
            for decoder, state in zip(decoders, decoder_states):
                adam_step(decoder, state, hp.weight_decay)
            running += loss.item()
            batches += 1
        epoch_loss = running / batches
        check_finite(epoch_loss, f"reconstruction loss at epoch {epoch}")
        history.append(epoch_loss)
        logger.info("Autoencoder epoch %d/%d - loss %.6f", epoch, hp.epochs, epoch_loss)
    return history
