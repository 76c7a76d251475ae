"""Location-function and user-group taxonomies plus the text encoders used to
turn their descriptions into semantic priors."""

from __future__ import annotations

import hashlib
import re
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

LOCATION_FUNCTIONS: tuple[str, ...] = (
    "entertainment",
    "commercial",
    "education",
    "public_service",
    "residential",
)

USER_GROUPS: tuple[str, ...] = (
    "student",
    "teacher",
    "office_worker",
    "visitor",
    "night_shift_worker",
    "remote_worker",
    "service_industry_worker",
    "public_service_official",
    "fitness_enthusiast",
    "retail_employee",
    "undefined_persona",
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _asset_text(*parts: str) -> str:
    path = resources.files("nextlocmoe").joinpath("assets")
    for part in parts:
        path = path.joinpath(part)
    return path.read_text("utf-8").strip()


def function_descriptions() -> list[str]:
    return [_asset_text("location_functions", f"{name}.txt") for name in LOCATION_FUNCTIONS]


def group_descriptions() -> list[str]:
    return [_asset_text("user_groups", f"{name}.txt") for name in USER_GROUPS]


def prompt_prefix_text() -> str:
    return _asset_text("prompt_prefix.txt")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class TextEncoder(Protocol):
    name: str
    dim: int

    def encode_tokens(self, text: str) -> np.ndarray:
        """Token-level encodings, shape (n_tokens, dim)."""
        ...

    def encode(self, text: str) -> np.ndarray:
        """Mean-pooled encoding, shape (dim,)."""
        ...


class HashingTextEncoder:
    """Deterministic stand-in for a language-model encoder.

    Every token maps to a fixed Gaussian vector seeded from a hash of the token
    and the encoder seed, so no model download is needed and repeated runs give
    identical vectors on every platform.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.name = f"hashing-bow-d{dim}-s{seed}"
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim) / np.sqrt(self.dim)
            self._cache[token] = vec
        return vec

    def encode_tokens(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError("cannot encode text with no tokens")
        return np.stack([self._token_vector(t) for t in tokens])

    def encode(self, text: str) -> np.ndarray:
        return self.encode_tokens(text).mean(axis=0)


class PrecomputedTextEncoder:
    """Encoder backed by sentence vectors computed offline.

    Each known text maps to a single vector, so token-level encodings are a
    one-row matrix and mean pooling is the identity.
    """

    def __init__(self, name: str, texts: Sequence[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(texts):
            raise ValueError(f"prior matrix shape {matrix.shape} does not match {len(texts)} texts")
        self.name = name
        self.dim = matrix.shape[1]
        self._table = {t: matrix[i] for i, t in enumerate(texts)}

    def encode_tokens(self, text: str) -> np.ndarray:
        try:
            return self._table[text][None, :]
        except KeyError:
            raise KeyError("text has no precomputed encoding") from None

    def encode(self, text: str) -> np.ndarray:
        return self.encode_tokens(text)[0]


def write_prior_matrix(path: str | Path, encoder_name: str, matrix: np.ndarray) -> None:
    """Write a K x d prior matrix as text: one ``# encoder=<name> dim=<d>``
    header line followed by one whitespace-separated row per category."""
    matrix = np.asarray(matrix, dtype=np.float64)
    lines = [f"# encoder={encoder_name} dim={matrix.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_prior_matrix(path: str | Path) -> tuple[str, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing '# encoder=... dim=...' header")
    fields = dict(item.split("=", 1) for item in text[0][1:].split() if "=" in item)
    if "encoder" not in fields or "dim" not in fields:
        raise ValueError(f"{path}: header must name encoder and dim")
    rows = [np.array(line.split(), dtype=np.float64) for line in text[1:] if line.strip()]
    matrix = np.stack(rows)
    if matrix.shape[1] != int(fields["dim"]):
        raise ValueError(f"{path}: rows have {matrix.shape[1]} columns, header says {fields['dim']}")
    return fields["encoder"], matrix


def load_precomputed_encoder(path: str | Path, texts: Sequence[str]) -> PrecomputedTextEncoder:
    name, matrix = read_prior_matrix(path)
    return PrecomputedTextEncoder(name, texts, matrix)
