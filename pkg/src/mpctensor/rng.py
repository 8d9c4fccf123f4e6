"""Deterministic cryptographic random streams (AES-128 in counter mode).

Every (party, purpose) pair owns its own stream. Streams are derived from a
session seed and a tuple of labels, so two runs with the same seed draw the
same values, while different labels give independent keystreams.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

_ZERO_BLOCK = bytes(1 << 16)


class RandomStream:
    """Keystream of AES-CTR under a 128-bit key. Not thread-safe."""

    def __init__(self, key: bytes):
        if len(key) != 16:
            raise ValueError("RandomStream key must be 16 bytes")
        self._enc = Cipher(algorithms.AES(key), modes.CTR(bytes(16))).encryptor()

    @classmethod
    def derive(cls, seed: int | bytes, *labels: object) -> RandomStream:
        h = hashlib.blake2b(digest_size=16, person=b"mpctensor-rng")
        h.update(seed if isinstance(seed, bytes) else str(int(seed)).encode())
        for label in labels:
            h.update(b"\x00" + str(label).encode())
        return cls(h.digest())

    @classmethod
    def from_os(cls) -> RandomStream:
        return cls(os.urandom(16))

    def read(self, nbytes: int) -> bytes:
        out = bytearray()
        while nbytes > 0:
            take = min(nbytes, len(_ZERO_BLOCK))
            out += self._enc.update(_ZERO_BLOCK[:take])
            nbytes -= take
        return bytes(out)

    def words(self, n: int) -> np.ndarray:
        """``n`` uniform 64-bit words as a uint64 vector."""
        return np.frombuffer(self.read(8 * n), dtype="<u8").astype(np.uint64)

    def below(self, n: int, modulus: int) -> np.ndarray:
        """``n`` exactly uniform integers in ``[0, modulus)`` by rejection."""
        limit = np.uint64(((1 << 64) // modulus) * modulus - 1)
        out = self.words(n)
        bad = out > limit
        while bad.any():
            out[bad] = self.words(int(bad.sum()))
            bad = out > limit
        return out % np.uint64(modulus)

    def bits(self, n: int, nbits: int) -> np.ndarray:
        """``n`` uniform integers below ``2**nbits`` as 32-bit limbs.

        Returns a uint64 array of shape ``(n, ceil(nbits/32))``, most
        significant limb first, each limb below ``2**32``.
        """
        nlimbs = max(1, -(-nbits // 32))
        limbs = self.words(n * nlimbs).reshape(n, nlimbs) & np.uint64(0xFFFFFFFF)
        top = nbits - 32 * (nlimbs - 1)
        limbs[:, 0] &= np.uint64((1 << top) - 1)
        return limbs
