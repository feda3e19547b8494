from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

# largest upper bound numpy can draw directly from an int64 generator
_INT64_DRAW_LIMIT = 2**62


def cid_width(upper_bound):
    """
    Number of bits in a code-word for identifiers drawn from {1..N}, that is
    ceil(log2 N) + 1.

    upper_bound (int): the identifier upper bound N, at least 2
    """
    upper_bound = int(upper_bound)
    if upper_bound < 2:
        raise ValueError(f"Identifier upper bound must be at least 2, got {upper_bound}")
    # (N - 1).bit_length() == ceil(log2 N) for every integer N >= 1
    return (upper_bound - 1).bit_length() + 1


@dataclass(frozen=True)
class Codeword:
    """Fixed-width binary code-word, bits[0] is the most significant bit."""

    bits: Tuple[int, ...]

    @property
    def width(self):
        return len(self.bits)

    @property
    def value(self):
        return decode_label(self.bits)

    def __getitem__(self, index):
        return self.bits[index]

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(str(b) for b in self.bits)


@dataclass(frozen=True)
class NodeIdentity:
    id: int
    codeword: Codeword
    group: Optional[int] = None


def to_bits(value, width):
    """MSB-first zero-padded bits of a nonnegative value."""
    if value < 0 or value >= 2**width:
        raise ValueError(f"Value {value} does not fit in {width} bits")
    return tuple((value >> (width - 1 - k)) & 1 for k in range(width))


def encode_cid(identifier, width):
    """
    It takes an identifier and a width and returns the fixed-width code-word,
    zero padded, most significant bit first.

    identifier (int): value in [1, 2**width)
    width (int): number of bits
    """
    if width < 1:
        raise ValueError(f"Code-word width must be positive, got {width}")
    if identifier < 1 or identifier >= 2**width:
        raise ValueError(f"Identifier {identifier} out of range for width {width}")
    return Codeword(to_bits(int(identifier), width))


def decode_label(bits):
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def _draw_uniform(rng, upper_bound):
    """One uniform draw from {1..upper_bound}, exact for arbitrarily large bounds."""
    if upper_bound <= _INT64_DRAW_LIMIT:
        return int(rng.integers(1, upper_bound + 1))

    # rejection sampling on raw bytes above the int64 range
    span_bits = (upper_bound - 1).bit_length()
    span_bytes = (span_bits + 7) // 8
    mask = (1 << span_bits) - 1
    while True:
        candidate = int.from_bytes(rng.bytes(span_bytes), "big") & mask
        if candidate < upper_bound:
            return candidate + 1


def sample_ids(count, upper_bound, rng):
    """
    Draws count identifiers independently and uniformly from {1..N}.
    Duplicates are kept as drawn.

    count (int): number of nodes M
    upper_bound (int): identifier upper bound N
    rng (np.random.Generator): source of randomness
    """
    if count < 0:
        raise ValueError(f"Node count must be nonnegative, got {count}")
    width = cid_width(upper_bound)

    identities = []
    for _ in range(count):
        identifier = _draw_uniform(rng, upper_bound)
        identities.append(NodeIdentity(id=identifier, codeword=encode_cid(identifier, width)))
    return identities


def sample_distinct_ids(count, upper_bound, rng):
    """Like sample_ids, but redraws collisions so every identifier is unique."""
    if count > upper_bound:
        raise ValueError(f"Cannot draw {count} distinct identifiers from {{1..{upper_bound}}}")
    width = cid_width(upper_bound)

    seen = set()
    identities = []
    while len(identities) < count:
        identifier = _draw_uniform(rng, upper_bound)
        if identifier in seen:
            continue
        seen.add(identifier)
        identities.append(NodeIdentity(id=identifier, codeword=encode_cid(identifier, width)))
    return identities
