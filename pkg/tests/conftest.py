"""Shared fixtures: synthetic NSL-KDD files and small toy datasets."""

import os
from pathlib import Path

import numpy as np
import pytest

from nslkdd_data import ATTRIBUTE_NAMES

# First line of KDDTrain+.txt
KDDTRAIN_FIRST_LINE = (
    "0,tcp,ftp_data,SF,491,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,2,2,0.00,0.00,0.00,0.00,"
    "1.00,0.00,0.00,150,25,0.17,0.03,0.17,0.00,0.00,0.00,0.05,0.00,normal,20"
)

# Per coarse class: fine-grained labels and a traffic signature
PROFILES = {
    "normal": {
        "labels": ["normal"],
        "protocol": "tcp", "service": "http", "flag": "SF",
        "numeric": {"src_bytes": (180, 320), "dst_bytes": (1000, 5000), "logged_in": (1, 1),
                    "same_srv_rate": (0.9, 1.0), "dst_host_srv_count": (200, 255)},
    },
    "dos": {
        "labels": ["neptune", "smurf", "back"],
        "protocol": "tcp", "service": "private", "flag": "S0",
        "numeric": {"count": (150, 500), "serror_rate": (0.9, 1.0), "srv_serror_rate": (0.9, 1.0),
                    "dst_host_serror_rate": (0.9, 1.0), "dst_host_count": (200, 255)},
    },
    "probe": {
        "labels": ["satan", "ipsweep", "portsweep"],
        "protocol": "icmp", "service": "eco_i", "flag": "SF",
        "numeric": {"src_bytes": (8, 20), "dst_host_diff_srv_rate": (0.6, 1.0),
                    "dst_host_same_src_port_rate": (0.8, 1.0), "rerror_rate": (0.3, 0.6)},
    },
    "r2l": {
        "labels": ["guess_passwd", "warezclient"],
        "protocol": "tcp", "service": "ftp", "flag": "RSTO",
        "numeric": {"num_failed_logins": (1, 4), "duration": (10, 60), "hot": (2, 10),
                    "is_guest_login": (1, 1)},
    },
    "u2r": {
        "labels": ["buffer_overflow", "rootkit"],
        "protocol": "tcp", "service": "telnet", "flag": "SF",
        "numeric": {"root_shell": (1, 1), "num_file_creations": (1, 5), "num_shells": (1, 2),
                    "duration": (100, 300)},
    },
}


def make_line(cls: str, rng: np.random.Generator, difficulty: bool = True) -> str:
    """One synthetic NSL-KDD line for a coarse class."""
    profile = PROFILES[cls]
    values = {}
    for name in ATTRIBUTE_NAMES:
        if name == "protocol_type":
            values[name] = profile["protocol"]
        elif name == "service":
            values[name] = profile["service"]
        elif name == "flag":
            values[name] = profile["flag"]
        elif name in profile["numeric"]:
            low, high = profile["numeric"][name]
            if isinstance(low, int) and isinstance(high, int):
                values[name] = str(int(rng.integers(low, high + 1)))
            else:
                values[name] = f"{rng.uniform(low, high):.2f}"
        else:
            values[name] = "0"
    label = profile["labels"][int(rng.integers(len(profile["labels"])))]
    fields = [values[name] for name in ATTRIBUTE_NAMES] + [label]
    if difficulty:
        fields.append(str(int(rng.integers(1, 22))))
    return ",".join(fields)


def write_nslkdd(path: Path, counts: dict[str, int], seed: int = 0) -> Path:
    """Write a synthetic NSL-KDD file with `counts` records per coarse class, interleaved."""
    rng = np.random.default_rng(seed)
    classes = [c for c, n in counts.items() for _ in range(n)]
    order = rng.permutation(len(classes))
    lines = [make_line(classes[i], rng) for i in order]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def nslkdd_writer(tmp_path):
    def write(name: str, counts: dict[str, int], seed: int = 0) -> Path:
        return write_nslkdd(tmp_path / name, counts, seed)

    return write


def blobs(centers, per_blob: int | list[int], spread: float, seed: int = 0) -> tuple[np.ndarray, list]:
    """Gaussian blobs streamed blob after blob; returns (X, blob index per row)."""
    rng = np.random.default_rng(seed)
    sizes = [per_blob] * len(centers) if isinstance(per_blob, int) else list(per_blob)
    rows, labels = [], []
    for k, (center, size) in enumerate(zip(centers, sizes)):
        center = np.asarray(center, dtype=np.float64)
        rows.append(rng.normal(center, spread, size=(size, len(center))))
        labels.extend([k] * size)
    return np.vstack(rows), labels


@pytest.fixture(scope="session")
def nslkdd_dir():
    """Directory with the real KDDTrain+.txt / KDDTest+.txt, or skip."""
    directory = os.environ.get("NSLKDD_DIR")
    if not directory:
        pytest.skip("NSLKDD_DIR not set")
    path = Path(directory)
    if not (path / "KDDTrain+.txt").exists() or not (path / "KDDTest+.txt").exists():
        pytest.skip(f"NSL-KDD files not found in {path}")
    return path
