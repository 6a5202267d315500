import struct

import numpy as np
import pytest

from drkd.data import write_cifar10_bin, write_idx


def idx_images_bytes(images) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">IIII", 0x803, *images.shape) + images.tobytes()


def idx_labels_bytes(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 0x801, labels.size) + labels.tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    """Well-formed 10-image 28x28 IDX fixture; pixel (0, 0, 0) is 255."""
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.arange(10, dtype=np.uint8)
    img, lab = tmp_path / "images.idx3", tmp_path / "labels.idx1"
    write_idx(images, labels, img, lab)
    return img, lab, images, labels


@pytest.fixture
def cifar_file(tmp_path):
    """Two CIFAR-10 records with labels 3 and 9; the first pixel byte is 128."""
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    images[0, 0, 0, 0] = 128
    path = tmp_path / "data_batch.bin"
    write_cifar10_bin(images, [3, 9], path)
    return path, images


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
