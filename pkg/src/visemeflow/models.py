"""Network assemblies: baseline CNN, convolutional autoencoder, LSTM head.

All models are plain parameter dictionaries plus pure forward/backward
functions, so the same code paths serve float32 training and float64
gradient checking.  Parameter names carry a role prefix (``enc.``, ``dec.``,
``lstm.``, ``head.``) which checkpoint subset-loading filters on; the frozen
feature extractor of the second training phase is exactly the ``enc.*``
subset.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn
from .datasets import Profile
from .errors import ConfigError, ShapeMismatchError
from .optim import ModelCheckpoint, OptimizerState, train_loop


@dataclass(frozen=True)
class ConvLayerSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    pool: int = 1  # 1 = none, p = p x p maxpool with stride p


@dataclass
class ArchitectureDescriptor:
    conv_layers: list
    feature_dim: int
    lstm_hidden: int
    vocab_size: int
    profile: Profile

    def as_dict(self) -> dict:
        return {
            "conv_layers": [
                [c.out_channels, c.kernel, c.stride, c.pad, c.pool]
                for c in self.conv_layers
            ],
            "feature_dim": self.feature_dim,
            "lstm_hidden": self.lstm_hidden,
            "vocab_size": self.vocab_size,
            "profile": {
                "name": self.profile.name,
                "T": self.profile.length,
                "H": self.profile.height,
                "W": self.profile.width,
            },
        }


def descriptor_from_dict(raw: dict) -> ArchitectureDescriptor:
    prof = raw["profile"]
    return ArchitectureDescriptor(
        conv_layers=[ConvLayerSpec(*layer) for layer in raw["conv_layers"]],
        feature_dim=int(raw["feature_dim"]),
        lstm_hidden=int(raw["lstm_hidden"]),
        vocab_size=int(raw["vocab_size"]),
        profile=Profile(prof.get("name", "custom"), prof["T"], prof["H"], prof["W"]),
    )


@dataclass
class ShapePlan:
    stages: list  # (channels, h, w) after every conv(+pool) layer
    flat_dim: int


def plan_shapes(desc: ArchitectureDescriptor) -> ShapePlan:
    """Walk the conv stack and record post-layer dims; reject broken geometry."""
    h, w = desc.profile.height, desc.profile.width
    channels = 1
    stages = []
    for i, layer in enumerate(desc.conv_layers):
        try:
            h = nn.conv_output_size(h, layer.kernel, layer.stride, layer.pad)
            w = nn.conv_output_size(w, layer.kernel, layer.stride, layer.pad)
        except ShapeMismatchError as exc:
            raise ConfigError(f"conv layer {i}: {exc}") from exc
        if layer.pool > 1:
            if h % layer.pool or w % layer.pool:
                raise ConfigError(
                    f"conv layer {i}: {layer.pool}x{layer.pool} pool does not "
                    f"divide feature map {h}x{w}"
                )
            h //= layer.pool
            w //= layer.pool
        channels = layer.out_channels
        stages.append((channels, h, w))
    if desc.feature_dim < 1:
        raise ConfigError("feature_dim must be at least 1")
    return ShapePlan(stages=stages, flat_dim=channels * h * w)


def _adaptive_pool(h: int, w: int) -> int:
    if h % 2 == 0 and w % 2 == 0:
        return 2
    if h % 3 == 0 and w % 3 == 0:
        return 3
    return 1


def full_architecture(profile: Profile, vocab_size: int) -> ArchitectureDescriptor:
    """Five 3x3 conv layers with rising channel counts, pooling where the
    feature map stays integral (the first three layers), 100-d features,
    512 LSTM units."""
    channels = (64, 96, 128, 160, 192)
    h, w = profile.height, profile.width
    layers = []
    for i, c in enumerate(channels):
        pool = _adaptive_pool(h, w) if i < 3 else 1
        layers.append(ConvLayerSpec(c, 3, 1, 1, pool))
        if pool > 1:
            h //= pool
            w //= pool
    desc = ArchitectureDescriptor(
        conv_layers=layers,
        feature_dim=100,
        lstm_hidden=512,
        vocab_size=vocab_size,
        profile=profile,
    )
    plan_shapes(desc)
    return desc


def desk_architecture(profile: Profile, vocab_size: int) -> ArchitectureDescriptor:
    """Two-layer variant small enough for laptop-scale runs and tests."""
    channels = (8, 16)
    h, w = profile.height, profile.width
    layers = []
    for c in channels:
        pool = _adaptive_pool(h, w)
        layers.append(ConvLayerSpec(c, 3, 1, 1, pool))
        if pool > 1:
            h //= pool
            w //= pool
    desc = ArchitectureDescriptor(
        conv_layers=layers,
        feature_dim=32,
        lstm_hidden=64,
        vocab_size=vocab_size,
        profile=profile,
    )
    plan_shapes(desc)
    return desc


ARCHITECTURES = {"full": full_architecture, "desk": desk_architecture}


def _xavier(fan_in, fan_out, shape, rng_seed, dtype):
    return nn.xavier_init(fan_in, fan_out, shape, seed=rng_seed, dtype=dtype)


def _seed_stream(seed):
    counter = [seed, 0]

    def next_seed():
        counter[1] += 1
        return list(counter)

    return next_seed


def init_encoder_params(desc, seed, dtype=np.float32, prefix="enc."):
    """Conv stack plus bottleneck dense, Xavier-initialized."""
    plan = plan_shapes(desc)
    stream = _seed_stream(seed)
    params = {}
    c_in = 1
    for i, layer in enumerate(desc.conv_layers):
        k = layer.kernel
        fan_in = c_in * k * k
        fan_out = layer.out_channels * k * k
        params[f"{prefix}conv{i}.w"] = _xavier(
            fan_in, fan_out, (layer.out_channels, c_in, k, k), stream(), dtype
        )
        params[f"{prefix}conv{i}.b"] = np.zeros(layer.out_channels, dtype=dtype)
        c_in = layer.out_channels
    params[f"{prefix}fc.w"] = _xavier(
        plan.flat_dim, desc.feature_dim, (plan.flat_dim, desc.feature_dim), stream(), dtype
    )
    params[f"{prefix}fc.b"] = np.zeros(desc.feature_dim, dtype=dtype)
    return params


def init_cnn_params(desc, seed, dtype=np.float32):
    """Baseline patch classifier: encoder plus a 2-way softmax head."""
    params = init_encoder_params(desc, seed, dtype)
    stream = _seed_stream(seed + 1)
    params["head.out.w"] = _xavier(
        desc.feature_dim, 2, (desc.feature_dim, 2), stream(), dtype
    )
    params["head.out.b"] = np.zeros(2, dtype=dtype)
    return params


def init_cae_params(desc, seed, dtype=np.float32):
    """Encoder plus mirrored decoder (dense, unpool and conv transposes)."""
    params = init_encoder_params(desc, seed, dtype)
    plan = plan_shapes(desc)
    stream = _seed_stream(seed + 2)
    params["dec.fc.w"] = _xavier(
        desc.feature_dim, plan.flat_dim, (desc.feature_dim, plan.flat_dim), stream(), dtype
    )
    params["dec.fc.b"] = np.zeros(plan.flat_dim, dtype=dtype)
    for i in reversed(range(len(desc.conv_layers))):
        layer = desc.conv_layers[i]
        c_out = layer.out_channels
        c_prev = desc.conv_layers[i - 1].out_channels if i > 0 else 1
        if layer.pool > 1:
            p = layer.pool
            params[f"dec.unpool{i}.w"] = _xavier(
                c_out * p * p, c_out * p * p, (c_out, c_out, p, p), stream(), dtype
            )
            params[f"dec.unpool{i}.b"] = np.zeros(c_out, dtype=dtype)
        k = layer.kernel
        params[f"dec.tconv{i}.w"] = _xavier(
            c_out * k * k, c_prev * k * k, (c_out, c_prev, k, k), stream(), dtype
        )
        params[f"dec.tconv{i}.b"] = np.zeros(c_prev, dtype=dtype)
    return params


def init_lstm_params(feature_dim, lstm_hidden, vocab_size, seed, dtype=np.float32):
    stream = _seed_stream(seed + 3)
    params = {
        "lstm.wx": _xavier(
            feature_dim, 4 * lstm_hidden, (feature_dim, 4 * lstm_hidden), stream(), dtype
        ),
        "lstm.wh": _xavier(
            lstm_hidden, 4 * lstm_hidden, (lstm_hidden, 4 * lstm_hidden), stream(), dtype
        ),
        "lstm.b": np.zeros(4 * lstm_hidden, dtype=dtype),
        "head.out.w": _xavier(
            lstm_hidden, vocab_size, (lstm_hidden, vocab_size), stream(), dtype
        ),
        "head.out.b": np.zeros(vocab_size, dtype=dtype),
    }
    # positive forget-gate bias keeps early cell state from washing out
    params["lstm.b"][lstm_hidden : 2 * lstm_hidden] = 1.0
    return params


def encoder_forward(params, desc, x, prefix="enc."):
    """Conv stack -> flatten -> bottleneck dense -> ReLU features."""
    caches = []
    out = x
    for i, layer in enumerate(desc.conv_layers):
        out, cache = nn.conv2d_forward(
            out, params[f"{prefix}conv{i}.w"], params[f"{prefix}conv{i}.b"],
            stride=layer.stride, pad=layer.pad,
        )
        caches.append(("conv", cache))
        caches.append(("relu", out))
        out = nn.relu(out)
        if layer.pool > 1:
            out, cache = nn.maxpool_forward(out, layer.pool, layer.pool)
            caches.append(("pool", cache))
    shape_before_flat = out.shape
    flat = out.reshape(out.shape[0], -1)
    caches.append(("flatten", shape_before_flat))
    z_pre, cache = nn.dense_forward(flat, params[f"{prefix}fc.w"], params[f"{prefix}fc.b"])
    caches.append(("dense", cache))
    caches.append(("relu", z_pre))
    return nn.relu(z_pre), caches


def encoder_backward(grad_z, caches, prefix="enc."):
    grads = {}
    conv_idx = sum(1 for kind, _ in caches if kind == "conv") - 1
    grad = grad_z
    for kind, cache in reversed(caches):
        if kind == "relu":
            grad = nn.relu_grad(cache, grad)
        elif kind == "dense":
            grad, gw, gb = nn.dense_backward(grad, cache)
            grads[f"{prefix}fc.w"] = gw
            grads[f"{prefix}fc.b"] = gb
        elif kind == "flatten":
            grad = grad.reshape(cache)
        elif kind == "pool":
            grad = nn.maxpool_backward(grad, cache)
        elif kind == "conv":
            grad, gw, gb = nn.conv2d_backward(grad, cache)
            grads[f"{prefix}conv{conv_idx}.w"] = gw
            grads[f"{prefix}conv{conv_idx}.b"] = gb
            conv_idx -= 1
    return grad, grads


def cnn_forward(params, desc, x):
    """Patch classifier logits [N, 2] plus caches."""
    feats, caches = encoder_forward(params, desc, x)
    logits, cache = nn.dense_forward(feats, params["head.out.w"], params["head.out.b"])
    caches.append(("head", cache))
    return logits, caches


def cnn_backward(grad_logits, caches):
    kind, cache = caches[-1]
    assert kind == "head"
    grad, gw, gb = nn.dense_backward(grad_logits, cache)
    _, grads = encoder_backward(grad, caches[:-1])
    grads["head.out.w"] = gw
    grads["head.out.b"] = gb
    return grads


def decoder_forward(params, desc, z, plan: ShapePlan):
    """Bottleneck -> dense -> mirrored transposed conv stack -> sigmoid."""
    caches = []
    pre, cache = nn.dense_forward(z, params["dec.fc.w"], params["dec.fc.b"])
    caches.append(("dense", cache))
    caches.append(("relu", pre))
    out = nn.relu(pre)
    c, h, w = plan.stages[-1]
    shape_flat = out.shape
    out = out.reshape(out.shape[0], c, h, w)
    caches.append(("reshape", shape_flat))
    for i in reversed(range(len(desc.conv_layers))):
        layer = desc.conv_layers[i]
        if layer.pool > 1:
            p = layer.pool
            out, cache = nn.conv2d_transpose_forward(
                out, params[f"dec.unpool{i}.w"], params[f"dec.unpool{i}.b"], stride=p
            )
            caches.append((f"unpool{i}", cache))
            caches.append(("relu", out))
            out = nn.relu(out)
        out, cache = nn.conv2d_transpose_forward(
            out, params[f"dec.tconv{i}.w"], params[f"dec.tconv{i}.b"],
            stride=layer.stride, pad=layer.pad,
        )
        caches.append((f"tconv{i}", cache))
        if i > 0:
            caches.append(("relu", out))
            out = nn.relu(out)
    recon = nn.sigmoid(out)
    caches.append(("sigmoid", recon))
    return recon, caches


def decoder_backward(grad_recon, caches):
    grads = {}
    grad = grad_recon
    for kind, cache in reversed(caches):
        if kind == "sigmoid":
            grad = nn.sigmoid_grad_from_out(cache, grad)
        elif kind == "relu":
            grad = nn.relu_grad(cache, grad)
        elif kind == "reshape":
            grad = grad.reshape(cache)
        elif kind == "dense":
            grad, gw, gb = nn.dense_backward(grad, cache)
            grads["dec.fc.w"] = gw
            grads["dec.fc.b"] = gb
        else:
            grad, gw, gb = nn.conv2d_transpose_backward(grad, cache)
            grads[f"dec.{kind}.w"] = gw
            grads[f"dec.{kind}.b"] = gb
    return grad, grads


def cae_forward(params, desc, x, plan=None):
    """Reconstruction, bottleneck features, caches for the full autoencoder."""
    if plan is None:
        plan = plan_shapes(desc)
    z, enc_caches = encoder_forward(params, desc, x)
    recon, dec_caches = decoder_forward(params, desc, z, plan)
    return recon, z, (enc_caches, dec_caches)


def cae_backward(grad_recon, caches):
    enc_caches, dec_caches = caches
    grad_z, dec_grads = decoder_backward(grad_recon, dec_caches)
    _, enc_grads = encoder_backward(grad_z, enc_caches)
    enc_grads.update(dec_grads)
    return enc_grads


def lstm_head_forward(params, feats):
    """Sequence classifier: LSTM final hidden state -> dense -> logits."""
    h, cache = nn.lstm_sequence(feats, params["lstm.wx"], params["lstm.wh"], params["lstm.b"])
    logits, head_cache = nn.dense_forward(h, params["head.out.w"], params["head.out.b"])
    return logits, (cache, head_cache)


def lstm_head_backward(grad_logits, caches, params):
    seq_cache, head_cache = caches
    grad_h, gw, gb = nn.dense_backward(grad_logits, head_cache)
    _, dwx, dwh, db = nn.lstm_sequence_backward(
        grad_h, seq_cache, params["lstm.wx"], params["lstm.wh"]
    )
    return {
        "lstm.wx": dwx,
        "lstm.wh": dwh,
        "lstm.b": db,
        "head.out.w": gw,
        "head.out.b": gb,
    }


def classification_accuracy(logits, labels) -> float:
    return float((np.argmax(logits, axis=1) == labels).mean())


def train_patch_classifier(
    desc: ArchitectureDescriptor,
    train_patches,
    train_labels,
    val_patches,
    val_labels,
    state: OptimizerState,
    seed: int,
) -> ModelCheckpoint:
    params = init_cnn_params(desc, seed)

    def batch_fn(p, idx):
        logits, caches = cnn_forward(p, desc, train_patches[idx])
        loss, grad = nn.softmax_cross_entropy(logits, train_labels[idx])
        return loss, cnn_backward(grad, caches)

    def metric_fn(p):
        logits, _ = cnn_forward(p, desc, val_patches)
        return classification_accuracy(logits, val_labels)

    ckpt = train_loop(
        params, len(train_patches), batch_fn, metric_fn, state, seed,
        maximize=True, architecture=desc.as_dict(),
    )
    ckpt.metadata["phase"] = "patch_classifier"
    return ckpt


def train_cae(
    desc: ArchitectureDescriptor,
    train_frames,
    val_frames,
    state: OptimizerState,
    seed: int,
) -> ModelCheckpoint:
    """Phase-1 reconstruction training; selection by validation MSE."""
    params = init_cae_params(desc, seed)
    plan = plan_shapes(desc)

    def batch_fn(p, idx):
        x = train_frames[idx]
        recon, _, caches = cae_forward(p, desc, x, plan)
        loss, grad = nn.mse_loss(recon, x)
        return loss, cae_backward(grad, caches)

    def metric_fn(p):
        total = 0.0
        count = 0
        for start in range(0, len(val_frames), 256):
            x = val_frames[start : start + 256]
            recon, _, _ = cae_forward(p, desc, x, plan)
            loss, _ = nn.mse_loss(recon, x)
            total += loss * len(x)
            count += len(x)
        return total / max(count, 1)

    ckpt = train_loop(
        params, len(train_frames), batch_fn, metric_fn, state, seed,
        maximize=False, architecture=desc.as_dict(),
    )
    ckpt.metadata["phase"] = "cae"
    return ckpt


def encoder_features(params, desc, frames, prefix="enc.", chunk=512):
    """Frame-wise feature rows [n, feature_dim] from the frozen encoder."""
    rows = []
    for start in range(0, len(frames), chunk):
        z, _ = encoder_forward(params, desc, frames[start : start + chunk], prefix)
        rows.append(z)
    return np.concatenate(rows, axis=0)


def _require_video_shape(desc, video):
    p = desc.profile
    expected = (p.length, 1, p.height, p.width)
    if tuple(video.shape) != expected:
        raise ConfigError(
            f"video shape {tuple(video.shape)} does not match profile "
            f"{p.name} {expected}"
        )


def cae_extract_features(params, desc, video):
    """[T, feature_dim] bottleneck activations; needs only enc.* tensors."""
    for i in range(len(desc.conv_layers)):
        if f"enc.conv{i}.w" not in params:
            raise ConfigError(f"missing encoder tensor enc.conv{i}.w")
    _require_video_shape(desc, video)
    return encoder_features(params, desc, video)


def cnn_extract_features(params, desc, video):
    """[T, feature_dim] penultimate activations of the patch classifier."""
    for i in range(len(desc.conv_layers)):
        if f"enc.conv{i}.w" not in params:
            raise ConfigError(f"missing encoder tensor enc.conv{i}.w")
    _require_video_shape(desc, video)
    return encoder_features(params, desc, video)


def train_lstm_classifier(
    features,
    labels,
    val_features,
    val_labels,
    desc: ArchitectureDescriptor,
    state: OptimizerState,
    seed: int,
) -> ModelCheckpoint:
    """Phase-2: sequence classifier over precomputed frozen-encoder features."""
    if state.clip_norm is None:
        # recurrent backprop is the one place gradients blow up in practice
        state = dataclasses.replace(state, clip_norm=5.0)
    params = init_lstm_params(desc.feature_dim, desc.lstm_hidden, desc.vocab_size, seed)

    def batch_fn(p, idx):
        logits, caches = lstm_head_forward(p, features[idx])
        loss, grad = nn.softmax_cross_entropy(logits, labels[idx])
        return loss, lstm_head_backward(grad, caches, p)

    def metric_fn(p):
        logits, _ = lstm_head_forward(p, val_features)
        return classification_accuracy(logits, val_labels)

    ckpt = train_loop(
        params, len(features), batch_fn, metric_fn, state, seed,
        maximize=True, architecture=desc.as_dict(),
    )
    ckpt.metadata["phase"] = "lstm_classifier"
    return ckpt


def predict_word(encoder_params, lstm_params, desc: ArchitectureDescriptor, video):
    """Full inference: frames -> frozen encoder -> LSTM -> softmax."""
    _require_video_shape(desc, video)
    feats = encoder_features(encoder_params, desc, video)
    logits, _ = lstm_head_forward(lstm_params, feats[None, :, :])
    probs = nn.softmax(logits)[0]
    return int(np.argmax(probs)), probs
