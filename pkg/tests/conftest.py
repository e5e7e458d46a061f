import pickle

import numpy as np
import pytest

from cudgnet.data import CORRUPTIONS


def make_images(n, seed=0):
    """Class-dependent colour blobs so tiny models can actually learn something."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    base = np.stack([np.full((32, 32, 3), 0.0)] * 10)
    for c in range(10):
        base[c, ..., c % 3] = 40 + 20 * c
        base[c, (c * 3) % 32:(c * 3) % 32 + 6, :, :] = 255 - 10 * c
    images = base[labels] + rng.normal(0, 12, size=(n, 32, 32, 3))
    return np.clip(images, 0, 255).astype(np.uint8), labels.astype(np.int64)


def write_cifar10_pickled(root, n_train=500, n_test=200, seed=0):
    folder = root / "cifar-10-batches-py"
    folder.mkdir(parents=True)
    images, labels = make_images(n_train, seed)
    chunks = np.array_split(np.arange(n_train), 5)
    for i, idx in enumerate(chunks, start=1):
        data = images[idx].transpose(0, 3, 1, 2).reshape(len(idx), -1)
        with open(folder / f"data_batch_{i}", "wb") as f:
            pickle.dump({b"data": data, b"labels": labels[idx].tolist()}, f)
    timages, tlabels = make_images(n_test, seed + 1)
    with open(folder / "test_batch", "wb") as f:
        pickle.dump({b"data": timages.transpose(0, 3, 1, 2).reshape(n_test, -1), b"labels": tlabels.tolist()}, f)
    return images, labels


def write_cifar10_binary(root, n_train=100, n_test=50, seed=0):
    folder = root / "cifar-10-batches-bin"
    folder.mkdir(parents=True)
    images, labels = make_images(n_train, seed)
    for i, idx in enumerate(np.array_split(np.arange(n_train), 5), start=1):
        rec = np.concatenate([labels[idx, None].astype(np.uint8),
                              images[idx].transpose(0, 3, 1, 2).reshape(len(idx), -1)], axis=1)
        rec.tofile(folder / f"data_batch_{i}.bin")
    timages, tlabels = make_images(n_test, seed + 1)
    rec = np.concatenate([tlabels[:, None].astype(np.uint8), timages.transpose(0, 3, 1, 2).reshape(n_test, -1)], axis=1)
    rec.tofile(folder / "test_batch.bin")
    return images, labels


def write_cifar10c(root, per_severity=20, names=None, seed=0):
    """Corrupted copies of one clean set: severity s adds noise of scale 10 * s."""
    folder = root / "CIFAR-10-C"
    folder.mkdir(parents=True)
    clean, labels = make_images(per_severity, seed + 1)
    np.save(folder / "labels.npy", np.tile(labels, 5).astype(np.uint8))
    rng = np.random.default_rng(seed)
    for name in names or CORRUPTIONS:
        stacks = []
        for s in range(1, 6):
            noisy = clean.astype(float) + rng.normal(0, 10 * s, size=clean.shape)
            stacks.append(np.clip(noisy, 0, 255).astype(np.uint8))
        np.save(folder / f"{name}.npy", np.concatenate(stacks))
    return clean, labels


@pytest.fixture
def fake_data_root(tmp_path):
    root = tmp_path / "data"
    write_cifar10_pickled(root)
    write_cifar10c(root)
    return root


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail=""):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
    print(ACCEPTANCE_LINES[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
