"""
Multi-Perspective Fusion
Early fusion (channel stacking), late fusion (shared single-view network, averaged embeddings)
and late fusion with one decoder per perspective
"""

import logging
from functools import reduce
from typing import Optional, Sequence, Union

import numpy as np

from exceptions import DataError, ShapeError
from models import (
    AutoencoderHyperParams,
    DatasetSplit,
    FusedEmbedding,
    FusionStrategy,
    NetSpec,
    PretrainedNetworks,
    SvddHyperParams,
    SvddModel,
    ViewStack,
)
from ndgrad import Tensor, add, no_grad, scale, take_channel
from nets import build_decoder, build_encoder, encode, train_autoencoder, transfer_encoder
from svdd import EmbedFn, anomaly_score, anomaly_scores, train_svdd

logger = logging.getLogger(__name__)


def stack_views(sample: ViewStack) -> Tensor:
    """Channel-wise concatenation (K, H, W) in the sample's view order"""
    shapes = {view.shape for view in sample.views}
    if len(shapes) != 1:
        raise ShapeError(f"views of sample {sample.sample_id!r} differ in size: {sorted(shapes)}")
    return Tensor(np.concatenate(sample.views, axis=0))


def strategy_net_spec(spec: NetSpec, strategy: FusionStrategy, n_views: int) -> NetSpec:
    """Early fusion sees K-channel stacks, the late variants see single views"""
    channels = n_views if FusionStrategy(strategy) == FusionStrategy.EARLY else 1
    return spec.with_channels(channels).validate()


def _check_one_class(train: DatasetSplit) -> None:
    anomalous = int(np.sum(train.labels()))
    if anomalous:
        raise DataError(f"pretraining data must contain normal samples only, found {anomalous} anomalous")
    if len(train) == 0:
        raise DataError("pretraining data is empty")


def _check_image_size(spec: NetSpec, stacks: np.ndarray) -> None:
    if tuple(stacks.shape[2:]) != tuple(spec.input_shape[1:]):
        raise ShapeError(f"images are {stacks.shape[2:]}, network expects {spec.input_shape[1:]}")


def pretrain(
    strategy: FusionStrategy,
    train: DatasetSplit,
    spec: NetSpec,
    hp: AutoencoderHyperParams,
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
    dtype=np.float64,
) -> PretrainedNetworks:
    """Reconstruction stage for one fusion strategy

    early: one CAE over K-channel stacks.
    late: one single-channel CAE trained on every view as an independent sample.
    late_dual: one shared encoder with K decoders, view i routed to decoder i.
    """
    strategy = FusionStrategy(strategy)
    _check_one_class(train)
    stacks = train.stacks(dtype)
    n, n_views = stacks.shape[0], stacks.shape[1]
    net_spec = strategy_net_spec(spec, strategy, n_views)
    _check_image_size(net_spec, stacks)

    encoder = build_encoder(net_spec, rng, dtype)
    if strategy == FusionStrategy.EARLY:
        decoders = [build_decoder(net_spec, rng, dtype)]
        views = stacks[:, None]
    elif strategy == FusionStrategy.LATE:
        decoders = [build_decoder(net_spec, rng, dtype)]
        views = stacks.reshape(n * n_views, 1, 1, *stacks.shape[2:])
    else:
        decoders = [build_decoder(net_spec, rng, dtype) for _ in range(n_views)]
        views = stacks[:, :, None]

    logger.info(
        "Pretraining %s fusion: %d training inputs, %d decoder(s), noise sigma %.3f",
        strategy.value,
        views.shape[0],
        len(decoders),
        noise_sigma,
    )
    history = train_autoencoder(encoder, decoders, views, net_spec, hp, rng, noise_sigma)
    return PretrainedNetworks(encoder, decoders, net_spec, strategy, history)


def fuse_embeddings(phis: Sequence[np.ndarray]) -> FusedEmbedding:
    """Arithmetic mean of the per-view embeddings"""
    if len(phis) == 0:
        raise ShapeError("no embeddings to fuse")
    vectors = [np.asarray(phi, dtype=np.float64).reshape(-1) for phi in phis]
    lengths = {v.shape[0] for v in vectors}
    if len(lengths) != 1:
        raise ShapeError(f"embeddings to fuse have different lengths {sorted(lengths)}")
    return FusedEmbedding(np.mean(np.stack(vectors), axis=0))


def make_embedder(strategy: FusionStrategy, stacks: np.ndarray, net_spec: NetSpec) -> EmbedFn:
    """Graph-recording embedding of stacks[index] for the given strategy"""
    strategy = FusionStrategy(strategy)

    def _embed(encoder, index):
        x = Tensor(stacks[index])
        if strategy == FusionStrategy.EARLY:
            return encode(encoder, x, net_spec)
        phis = [encode(encoder, take_channel(x, v), net_spec) for v in range(x.shape[1])]
        if len(phis) == 1:
            return phis[0]
        return scale(reduce(add, phis), 1.0 / len(phis))

    return _embed


def _weight_dtype(encoder) -> np.dtype:
    return encoder[encoder.names()[0]].data.dtype


def _checked_stacks(model: SvddModel, samples: Union[DatasetSplit, Sequence[ViewStack]]) -> np.ndarray:
    samples = list(samples)
    if not samples:
        raise DataError("no samples to score")
    counts = {s.n_views for s in samples}
    if len(counts) != 1:
        raise ShapeError(f"samples carry different view counts {sorted(counts)}")
    n_views = counts.pop()
    if model.fusion_tag == FusionStrategy.EARLY and n_views != model.net_spec.input_shape[0]:
        raise ShapeError(
            f"early-fusion model was trained on {model.net_spec.input_shape[0]} views, samples have {n_views}"
        )
    stacks = np.stack([np.concatenate(s.views, axis=0) for s in samples]).astype(_weight_dtype(model.encoder))
    _check_image_size(model.net_spec, stacks)
    return stacks


def embed_samples(
    model: SvddModel, samples: Union[DatasetSplit, Sequence[ViewStack]], batch_size: int = 64
) -> np.ndarray:
    """Fused embedding per sample, shape (n, p)"""
    stacks = _checked_stacks(model, samples)
    embed = make_embedder(model.fusion_tag, stacks, model.net_spec)
    with no_grad():
        parts = [
            embed(model.encoder, np.arange(start, min(start + batch_size, len(stacks)))).data
            for start in range(0, len(stacks), batch_size)
        ]
    return np.concatenate(parts, axis=0).astype(np.float64)


def score_sample(model: SvddModel, sample: ViewStack) -> float:
    """Exactly one anomaly score per object"""
    stacks = _checked_stacks(model, [sample])
    with no_grad():
        if model.fusion_tag == FusionStrategy.EARLY:
            phi = encode(model.encoder, Tensor(stacks), model.net_spec).data[0]
        else:
            phis = [
                encode(model.encoder, Tensor(stacks[:, v : v + 1]), model.net_spec).data[0]
                for v in range(stacks.shape[1])
            ]
            phi = fuse_embeddings(phis).phi_bar
    return anomaly_score(model, phi)


def score_samples(
    model: SvddModel, samples: Union[DatasetSplit, Sequence[ViewStack]], batch_size: int = 64
) -> np.ndarray:
    return anomaly_scores(model, embed_samples(model, samples, batch_size))


def single_view(sample: ViewStack, index: int) -> ViewStack:
    """The sample reduced to one perspective, for single-perspective scoring with a late-fusion model"""
    if not 0 <= index < sample.n_views:
        raise ShapeError(f"sample has {sample.n_views} views, cannot select view {index}")
    return ViewStack(
        views=[sample.views[index]],
        label=sample.label,
        anomaly_type=sample.anomaly_type,
        sample_id=f"{sample.sample_id}#v{index}",
    )


def fit_fusion_model(
    strategy: FusionStrategy,
    train: DatasetSplit,
    spec: NetSpec,
    ae_hp: AutoencoderHyperParams,
    svdd_hp: SvddHyperParams,
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
    dtype=np.float64,
    pretrained: Optional[PretrainedNetworks] = None,
) -> SvddModel:
    """Pretrain, transfer the encoder, discard the decoder(s), train the SVDD stage"""
    strategy = FusionStrategy(strategy)
    if pretrained is None:
        pretrained = pretrain(strategy, train, spec, ae_hp, rng, noise_sigma, dtype)
    elif pretrained.strategy != strategy:
        raise ShapeError(f"pretrained networks belong to {pretrained.strategy.value}, not {strategy.value}")
    _check_one_class(train)
    encoder = transfer_encoder(pretrained.encoder, pretrained.net_spec)
    stacks = train.stacks(_weight_dtype(encoder))
    embed = make_embedder(strategy, stacks, pretrained.net_spec)
    return train_svdd(encoder, embed, len(stacks), svdd_hp, rng, strategy, pretrained.net_spec)

