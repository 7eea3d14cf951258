"""Independent oracle for the MAC golden vectors and the hybrid error table.

Usage: python3 gen_golden.py > golden.txt
"""
import random
import sys

from mpmath import mp, mpf, power, nint

mp.prec = 200


def lut(gamma, frac_bits, stride, size):
    return [int(nint(power(2, frac_bits) * power(2, mpf(-i * stride) / gamma))) for i in range(size)]


def mac(a, b, gamma, frac_bits, acc_bits, lut_bits):
    bits = gamma.bit_length() - 1
    mitchell_bits = bits - lut_bits
    table = lut(gamma, frac_bits, 1 << mitchell_bits, 1 << lut_bits)
    trees = [0] * len(table)
    for (ea, sa), (eb, sb) in zip(a, b):
        if ea is None or eb is None:
            continue
        p = ea + eb
        q, r = p >> bits, p & (gamma - 1)
        r_m, r_l = r >> mitchell_bits, r & ((1 << mitchell_bits) - 1)
        unit = (1 << frac_bits) - (r_l << (frac_bits - bits - 1)) if r_l else 1 << frac_bits
        v = 0 if q >= frac_bits else unit >> q
        trees[r_m] += -v if sa != sb else v
    limit = (1 << (acc_bits - 1)) - 1
    acc = 0
    for s, c in zip(trees, table):
        prod = s * c
        mag = abs(prod) >> frac_bits
        acc = max(-limit, min(limit, acc + (-mag if prod < 0 else mag)))
    return acc


def hexs(v):
    return f"-0x{-v:X}" if v < 0 else f"0x{v:X}"


def line(a, b, expected):
    exps = lambda v: ",".join("z" if e is None else str(e) for e, _ in v)
    signs = lambda v: "".join("-" if s else "+" for _, s in v)
    return f"{exps(a)} | {signs(a)} | {exps(b)} | {signs(b)} | {hexs(expected)}"


def hybrid_table(gamma=8, frac_bits=23):
    """Max relative error of hybrid against exact conversion over all remainders."""
    bits = gamma.bit_length() - 1
    exact = lut(gamma, frac_bits, 1, gamma)
    rows = []
    for lut_bits in range(bits + 1):
        worst = mpf(0)
        for r in range(gamma):
            got = mac([(r, False)], [(0, False)], gamma, frac_bits, 62, lut_bits)
            worst = max(worst, abs(mpf(got - exact[r])) / exact[r])
        rows.append((lut_bits, worst))
    return rows


def main():
    rng = random.Random(20240611)
    out = sys.stdout
    out.write("# generated by gen_golden.py (mpmath LUT, integer MAC model)\n")
    blocks = [
        # (bitwidth, gamma, frac_bits, acc_bits, vector_size, lut_bits or None, count, zero_prob)
        (8, 8, 23, 32, 32, None, 60, 0.1),
        (8, 8, 23, 24, 32, None, 30, 0.0),
        (8, 8, 23, 32, 32, 0, 25, 0.1),
        (8, 8, 23, 32, 32, 1, 25, 0.1),
        (8, 8, 23, 32, 32, 2, 25, 0.1),
        (8, 4, 16, 24, 16, None, 20, 0.1),
        (10, 16, 23, 32, 32, 2, 20, 0.1),
    ]
    out.write("@ bitwidth=8 gamma=8 frac_bits=23 accumulator_bits=32 vector_size=32 conversion=exact\n")
    out.write(line([(0, False), (8, False)], [(0, False), (0, False)], 0xC00000) + "\n")
    for bw, gamma, fb, acc, vs, lb, count, zp in blocks:
        conv = "exact" if lb is None else f"hybrid:{lb}"
        out.write(f"@ bitwidth={bw} gamma={gamma} frac_bits={fb} accumulator_bits={acc} vector_size={vs} conversion={conv}\n")
        max_e = (1 << (bw - 1)) - 1
        for _ in range(count):
            n = rng.randint(1, vs)
            # small exponents push the 24-bit accumulator into saturation
            hi = 6 if acc == 24 else max_e
            same_sign = acc == 24
            lane = lambda: (None if rng.random() < zp else rng.randint(0, hi), False if same_sign else rng.random() < 0.5)
            a = [lane() for _ in range(n)]
            b = [lane() for _ in range(n)]
            expected = mac(a, b, gamma, fb, acc, gamma.bit_length() - 1 if lb is None else lb)
            out.write(line(a, b, expected) + "\n")


if __name__ == "__main__":
    if sys.argv[1:] == ["--hybrid-table"]:
        for lut_bits, err in hybrid_table():
            print(lut_bits, mp.nstr(err, 17))
    else:
        main()
