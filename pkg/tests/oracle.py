"""Independent reference implementations used by the tests.

Nothing here imports the package: circuits are nested tuples, text is
produced by a separate formatter, and impedance is straight-line scalar
complex arithmetic with ``cmath``.
"""

import cmath
import math
import random

LETTERS = "RCLP"


def random_tree(rng: random.Random, max_depth: int = 4, counter=None):
    """Random series tree as ``("SER", [items])`` with ``("PAR", [branches])`` and ``(letter, index)`` leaves."""
    counter = counter if counter is not None else [0]

    def leaf():
        counter[0] += 1
        return (rng.choice(LETTERS), counter[0])

    def series(depth):
        items = []
        for _ in range(rng.randint(1, 3)):
            if depth < max_depth and rng.random() < 0.35:
                items.append(parallel(depth + 1))
            else:
                items.append(leaf())
        return ("SER", items)

    def parallel(depth):
        return ("PAR", [series(depth) for _ in range(rng.randint(2, 3))])

    return series(1)


def tree_depth(node) -> int:
    tag = node[0]
    if tag == "SER":
        return max(tree_depth(i) for i in node[1]) if any(i[0] == "PAR" for i in node[1]) else 1
    if tag == "PAR":
        return 1 + max(tree_depth(b) for b in node[1])
    return 0


def to_text(node) -> str:
    tag = node[0]
    if tag == "SER":
        return "-".join(to_text(i) for i in node[1])
    if tag == "PAR":
        return "[" + ",".join(to_text(b) for b in node[1]) + "]"
    return f"{tag}{node[1]}"


def leaves(node):
    tag = node[0]
    if tag in ("SER", "PAR"):
        for child in node[1]:
            yield from leaves(child)
    else:
        yield node


def random_values(rng: random.Random, tree) -> dict:
    """Physically plausible values per leaf label; CPE gets (Q, alpha)."""
    vals = {}
    for letter, idx in leaves(tree):
        label = f"{letter}{idx}"
        if letter == "R":
            vals[label] = (10 ** rng.uniform(0, 5),)
        elif letter in "CL":
            vals[label] = (10 ** rng.uniform(-6, -3),)
        else:
            vals[label] = (10 ** rng.uniform(-6, -3), rng.uniform(0.3, 1.0))
    return vals


def flat_params(tree, vals) -> list:
    out = []
    for letter, idx in leaves(tree):
        out.extend(vals[f"{letter}{idx}"])
    return out


def z_leaf(letter, values, omega):
    if letter == "R":
        return complex(values[0], 0.0)
    if letter == "C":
        return 1 / (1j * omega * values[0])
    if letter == "L":
        return 1j * omega * values[0]
    q, alpha = values
    # (j w)^alpha = w^alpha * exp(j pi alpha / 2)
    return 1 / (q * omega**alpha * cmath.exp(0.5j * math.pi * alpha))


def z_tree(node, vals, omega) -> complex:
    tag = node[0]
    if tag == "SER":
        total = 0j
        for item in node[1]:
            total += z_tree(item, vals, omega)
        return total
    if tag == "PAR":
        admittance = 0j
        for branch in node[1]:
            admittance += 1 / z_tree(branch, vals, omega)
        return 1 / admittance
    return z_leaf(tag, vals[f"{tag}{node[1]}"], omega)


def percentile_linear(values, q):
    """Sort-based linear-interpolation percentile (numpy's default method)."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = math.ceil(pos)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)
