"""The classifier being improved: a small conv net whose weights can be
frozen while a synthesizer differentiates through it.

Architecture: three blocks of [3x3 conv, batch norm, relu, 2x2 max pool],
then a hidden dense layer, relu, a dense output layer and softmax. The
"paper" scale uses 64/128/256 filters with a 512-wide hidden layer; the
"desk" scale (16/32/64, 128) keeps full cycles runnable in minutes.
"""

import hashlib

import numpy as np

from .autodiff import (
    Tensor,
    batch_norm,
    bias_add,
    conv2d,
    cross_entropy,
    matmul,
    max_pool2d,
    mul,
    relu,
    reshape,
    softmax,
)

SCALES = {
    "paper": ((64, 128, 256), 512),
    "desk": ((16, 32, 64), 128),
}

CHECKPOINT_VERSION = 1


class FrozenNetError(RuntimeError):
    """A mutating operation was attempted on a frozen network."""


class EmptyDatasetError(ValueError):
    pass


class CheckpointVersionError(RuntimeError):
    pass


class ConvClassifier:
    def __init__(self, num_classes=10, in_channels=1, image_size=(28, 28),
                 scale="paper", seed=0, dtype=np.float32):
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.image_size = tuple(image_size)
        self.scale = scale
        self.dtype = np.dtype(dtype)
        self.frozen = False
        self.bn_momentum = 0.1
        self.bn_eps = 1e-5

        filters, hidden = SCALES[scale]
        rng = np.random.default_rng(seed)
        h, w = self.image_size
        self.conv_w, self.bn_gamma, self.bn_beta = [], [], []
        self.bn_mean, self.bn_var = [], []
        cin = in_channels
        for cout in filters:
            std = np.sqrt(2.0 / (cin * 9))
            self.conv_w.append(Tensor(rng.normal(0, std, (cout, cin, 3, 3)).astype(self.dtype),
                                      requires_grad=True))
            self.bn_gamma.append(Tensor(np.ones(cout, dtype=self.dtype), requires_grad=True))
            self.bn_beta.append(Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True))
            self.bn_mean.append(np.zeros(cout, dtype=self.dtype))
            self.bn_var.append(np.ones(cout, dtype=self.dtype))
            cin = cout
            h, w = h // 2, w // 2
        self.flat_dim = filters[-1] * h * w
        std = np.sqrt(2.0 / self.flat_dim)
        self.fc1_w = Tensor(rng.normal(0, std, (self.flat_dim, hidden)).astype(self.dtype),
                            requires_grad=True)
        self.fc1_b = Tensor(np.zeros(hidden, dtype=self.dtype), requires_grad=True)
        std = np.sqrt(1.0 / hidden)
        self.fc2_w = Tensor(rng.normal(0, std, (hidden, num_classes)).astype(self.dtype),
                            requires_grad=True)
        self.fc2_b = Tensor(np.zeros(num_classes, dtype=self.dtype), requires_grad=True)

    def params(self):
        out = []
        for i in range(len(self.conv_w)):
            out += [self.conv_w[i], self.bn_gamma[i], self.bn_beta[i]]
        out += [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
        return out

    def forward(self, x, training=False):
        """Class probabilities (B, K) for an image batch. Training mode uses
        batch statistics for normalization and updates the running buffers;
        a frozen net only runs in inference mode."""
        if training and self.frozen:
            raise FrozenNetError("training-mode forward would mutate batch-norm statistics")
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.data.ndim != 4 or t.data.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) input, got {t.data.shape}")
        for i in range(len(self.conv_w)):
            t = conv2d(t, self.conv_w[i])
            t = batch_norm(t, self.bn_gamma[i], self.bn_beta[i],
                           self.bn_mean[i], self.bn_var[i], training,
                           momentum=self.bn_momentum, eps=self.bn_eps)
            t = max_pool2d(relu(t))
        t = reshape(t, (t.data.shape[0], self.flat_dim))
        t = relu(bias_add(matmul(t, self.fc1_w), self.fc1_b))
        return softmax(bias_add(matmul(t, self.fc2_w), self.fc2_b))

    def freeze(self):
        self.frozen = True
        for p in self.params():
            p.requires_grad = False
            p.zero_grad()

    def unfreeze(self):
        self.frozen = False
        for p in self.params():
            p.requires_grad = True

    def weight_checksum(self):
        """SHA-256 over all weights and normalization statistics."""
        digest = hashlib.sha256()
        for p in self.params():
            digest.update(np.ascontiguousarray(p.data).tobytes())
        for buf in self.bn_mean + self.bn_var:
            digest.update(np.ascontiguousarray(buf).tobytes())
        return digest.hexdigest()

    def save(self, path):
        arrays = {"checkpoint_version": np.int64(CHECKPOINT_VERSION),
                  "num_classes": np.int64(self.num_classes),
                  "in_channels": np.int64(self.in_channels),
                  "image_size": np.asarray(self.image_size, dtype=np.int64),
                  "scale": np.bytes_(self.scale.encode()),
                  "frozen": np.bool_(self.frozen)}
        for i in range(len(self.conv_w)):
            arrays[f"conv{i}_w"] = self.conv_w[i].data
            arrays[f"bn{i}_gamma"] = self.bn_gamma[i].data
            arrays[f"bn{i}_beta"] = self.bn_beta[i].data
            arrays[f"bn{i}_mean"] = self.bn_mean[i]
            arrays[f"bn{i}_var"] = self.bn_var[i]
        arrays["fc1_w"], arrays["fc1_b"] = self.fc1_w.data, self.fc1_b.data
        arrays["fc2_w"], arrays["fc2_b"] = self.fc2_w.data, self.fc2_b.data
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as arrays:
            if "checkpoint_version" not in arrays:
                raise CheckpointVersionError(f"{path}: not a classifier checkpoint")
            version = int(arrays["checkpoint_version"])
            if version != CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
            net = cls(num_classes=int(arrays["num_classes"]),
                      in_channels=int(arrays["in_channels"]),
                      image_size=tuple(arrays["image_size"]),
                      scale=bytes(arrays["scale"]).decode())
            for i in range(len(net.conv_w)):
                net.conv_w[i].data = arrays[f"conv{i}_w"].copy()
                net.bn_gamma[i].data = arrays[f"bn{i}_gamma"].copy()
                net.bn_beta[i].data = arrays[f"bn{i}_beta"].copy()
                net.bn_mean[i] = arrays[f"bn{i}_mean"].copy()
                net.bn_var[i] = arrays[f"bn{i}_var"].copy()
            net.fc1_w.data = arrays["fc1_w"].copy()
            net.fc1_b.data = arrays["fc1_b"].copy()
            net.fc2_w.data = arrays["fc2_w"].copy()
            net.fc2_b.data = arrays["fc2_b"].copy()
            if bool(arrays["frozen"]):
                net.freeze()
        return net


def one_hot(labels, num_classes, dtype=np.float32):
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def train(net, dataset, epochs, optimizer, batch_size=64, seed=0, test_dataset=None):
    """Minibatch cross-entropy descent; returns one history entry per epoch
    with train loss/accuracy (and test accuracy when a test set is given)."""
    if net.frozen:
        raise FrozenNetError("cannot train a frozen network")
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(dataset))
        total_loss, correct = 0.0, 0
        for start in range(0, len(dataset), batch_size):
            idx = perm[start:start + batch_size]
            probs = net.forward(dataset.images[idx], training=True)
            targets = one_hot(dataset.labels[idx], net.num_classes, dtype=probs.dtype)
            loss = mul(cross_entropy(probs, Tensor(targets)), 1.0 / len(idx))
            loss.backward()
            optimizer.step()
            total_loss += float(loss.data) * len(idx)
            correct += int((probs.data.argmax(axis=1) == dataset.labels[idx]).sum())
        entry = {
            "epoch": epoch,
            "loss": total_loss / len(dataset),
            "train_acc": correct / len(dataset),
        }
        if test_dataset is not None:
            entry["test_acc"], entry["test_loss"] = evaluate(net, test_dataset)
        history.append(entry)
    return history


def evaluate(net, dataset, batch_size=256):
    """Accuracy and mean cross-entropy of a dataset, inference mode."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate an empty dataset")
    correct, total_loss = 0, 0.0
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        probs = net.forward(dataset.images[start:stop], training=False)
        labels = dataset.labels[start:stop]
        targets = one_hot(labels, net.num_classes, dtype=probs.dtype)
        total_loss += float(cross_entropy(probs, Tensor(targets)).data)
        correct += int((probs.data.argmax(axis=1) == labels).sum())
    return correct / len(dataset), total_loss / len(dataset)
