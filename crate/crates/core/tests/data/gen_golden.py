#!/usr/bin/env python3
"""Regenerates the golden vectors under v1/.

Independent of the Rust code: values are computed with exact rationals.
Run from this directory: python3 gen_golden.py
"""

import os
import random
import struct
from fractions import Fraction

OUT = "v1"


def write_dfxt(path, shape, bits, exponent, mantissas):
    buf = b"DFXT" + struct.pack("<HBB", 1, bits, len(shape))
    for d in shape:
        buf += struct.pack("<I", d)
    buf += struct.pack("<h", -32768 if exponent is None else exponent)
    buf += struct.pack("<%db" % len(mantissas), *mantissas)
    with open(path, "wb") as f:
        f.write(buf)


def half_even(q):
    """Round a non-negative rational to the nearest integer, ties to even."""
    n = q.numerator // q.denominator
    r = q - n
    if r > Fraction(1, 2) or (r == Fraction(1, 2) and n % 2 == 1):
        n += 1
    return n


def exponent_of(x):
    """Unbiased IEEE exponent of a nonzero finite float32; subnormals report -126."""
    bits = struct.unpack("<I", struct.pack("<f", x))[0]
    e = (bits >> 23) & 0xFF
    return -126 if e == 0 else e - 127


def nearest_map(values, bits):
    nz = [v for v in values if v != 0.0]
    if not nz:
        return None, [0] * len(values)
    e_max = max(exponent_of(v) for v in nz)
    ulp = Fraction(2) ** (e_max - (bits - 2))
    limit = 2 ** (bits - 1) - 1
    out = []
    for v in values:
        m = min(half_even(abs(Fraction(v)) / ulp), limit)
        out.append(-m if v < 0 else m)
    if all(m == 0 for m in out):
        return None, out
    return e_max, out


def floor_log2(q):
    n = q.numerator.bit_length() - q.denominator.bit_length()
    while Fraction(2) ** n > q:
        n -= 1
    while Fraction(2) ** (n + 1) <= q:
        n += 1
    return n


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def rounding_cases(rng):
    lines = ["# m24_hex keep_bits draw_hex expected_hex", "# up iff draw < the discarded low bits"]
    fixed = [
        (0x596AA0, 7, 0, None),
        (0x596AA0, 7, 0x1FFFF, None),
        (0xFFFFFF, 7, 0, None),
        (0xFFFFFF, 7, 0x1FFFF, None),
        (0x800000, 3, 0x1FFFFF, None),
        (0x800001, 3, 0, None),
        (0x800001, 3, 1, None),
        (0xC00000, 23, 0, None),
        (0xC00001, 23, 0, None),
    ]
    cases = [(m, k, d) for m, k, d, _ in fixed]
    for _ in range(400):
        k = rng.randint(1, 23)
        m = rng.randrange(1 << 24)
        drop = 24 - k
        lo = m & ((1 << drop) - 1)
        d = rng.choice([rng.randrange(1 << drop), lo, max(lo - 1, 0), (1 << drop) - 1])
        cases.append((m, k, d))
    for m, k, d in cases:
        drop = 24 - k
        hi, lo = m >> drop, m & ((1 << drop) - 1)
        lines.append("%06x %d %x %x" % (m, k, d, hi + 1 if d < lo else hi))
    return "\n".join(lines) + "\n"


def map_inputs(rng):
    sub = struct.unpack("<f", struct.pack("<I", 0x00000005))[0]
    sets = [
        [1.0, -0.5, 0.25, 0.0, 3.0, -2.75],
        # ties at k = 8: 1.5 and 2.5 units of 2^-6 on a max of 1
        [1.0, 1.5 * 2 ** -6, 2.5 * 2 ** -6, -3.5 * 2 ** -6, -0.5 * 2 ** -6],
        # saturation: 1.9999999 rounds up past the top mantissa
        [f32(1.9999999), 0.3, -f32(1.9999999)],
        [sub, -3 * sub, 0.0],
        [0.0, 0.0, 0.0],
        [f32(rng.gauss(0, 1) * 2 ** rng.randint(-20, 20)) for _ in range(64)],
        [f32(rng.gauss(0, 1) * 2 ** rng.uniform(-30, 0)) for _ in range(64)],
    ]
    return sets


def main():
    rng = random.Random(20240601)
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(OUT, "rounding.txt"), "w") as f:
        f.write(rounding_cases(rng))

    for i, vals in enumerate(map_inputs(rng)):
        with open(os.path.join(OUT, "map_%d.f32" % i), "wb") as f:
            f.write(struct.pack("<%df" % len(vals), *vals))
        for k in (4, 6, 8):
            e, m = nearest_map(vals, k)
            write_dfxt(os.path.join(OUT, "map_%d_k%d.dfxt" % (i, k)), [len(vals)], k, e, m)

    for i in range(12):
        k = 4 + i % 5
        lim = 2 ** (k - 1) - 1
        mm, kk, nn = rng.randint(1, 16), rng.randint(1, 64), rng.randint(1, 16)
        ea, eb = rng.randint(-20, 20), rng.randint(-20, 20)
        a = [rng.randint(-lim, lim) for _ in range(mm * kk)]
        b = [rng.randint(-lim, lim) for _ in range(kk * nn)]
        a[0] = lim
        b[-1] = -lim
        if i == 11:
            a = [0] * (mm * kk)
        write_dfxt(os.path.join(OUT, "gemm_%d_a.dfxt" % i), [mm, kk], k, None if i == 11 else ea, a)
        write_dfxt(os.path.join(OUT, "gemm_%d_b.dfxt" % i), [kk, nn], k, eb, b)
        acc = [sum(a[r * kk + p] * b[p * nn + c] for p in range(kk)) for r in range(mm) for c in range(nn)]
        unit = (ea - (k - 2)) + (eb - (k - 2))
        with open(os.path.join(OUT, "gemm_%d_acc.txt" % i), "w") as f:
            f.write("# shape, unit exponent, then one accumulator value per line\n")
            f.write("%d %d\n%d\n" % (mm, nn, unit))
            f.write("".join("%d\n" % v for v in acc))
        vals = [Fraction(v) * Fraction(2) ** unit for v in acc]
        nz = [v for v in vals if v != 0]
        if not nz:
            e, m = None, [0] * len(vals)
        else:
            # integer multiples of 2^unit below 2^24 units, so each is an exact float32
            e_max = floor_log2(max(abs(v) for v in nz))
            ulp = Fraction(2) ** (e_max - (k - 2))
            m = [min(half_even(abs(v) / ulp), lim) * (1 if v >= 0 else -1) for v in vals]
            e = e_max
        write_dfxt(os.path.join(OUT, "gemm_%d_k%d.dfxt" % (i, k)), [mm, nn], k, e, m)


if __name__ == "__main__":
    main()
