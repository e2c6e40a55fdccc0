"""Independent brute-force oracles used only by tests.

Kept deliberately naive: explicit loops over a 5x5x5 image block for the
neighbor search and scalar loops elsewhere, sharing no code with the
implementations they check.
"""

import numpy as np


def brute_force_neighbors(structure, radius, max_neighbors):
    """Enumerate every pair across image offsets -2..2, then sort and cut.

    Returns (src, dst, image, distance) tuples in anchor-major order with the
    documented tie-break: ascending distance, then neighbor index, then image
    vector lexicographically.
    """
    lattice = structure.lattice
    cart = structure.frac_coords @ lattice
    n = len(cart)
    per_anchor = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            for n0 in (-2, -1, 0, 1, 2):
                for n1 in (-2, -1, 0, 1, 2):
                    for n2 in (-2, -1, 0, 1, 2):
                        shift = np.array([n0, n1, n2]) @ lattice
                        disp = cart[j] + shift - cart[i]
                        d = np.sqrt((disp * disp).sum())
                        if 0.0 < d <= radius:
                            per_anchor[i].append((d, j, (n0, n1, n2)))
    edges = []
    for i in range(n):
        assert per_anchor[i], f"oracle found atom {i} isolated"
        per_anchor[i].sort(key=lambda t: (t[0], t[1], t[2]))
        for d, j, img in per_anchor[i][:max_neighbors]:
            edges.append((i, j, img, d))
    return edges


def pooled_means(node_feats, crystal_ids, n_crystals):
    """Scalar-loop mean pooling."""
    width = len(node_feats[0])
    out = []
    for c in range(n_crystals):
        members = [row for row, cid in zip(node_feats, crystal_ids) if cid == c]
        out.append([sum(m[k] for m in members) / len(members) for k in range(width)])
    return out


def count_elements(cif_texts):
    """Recount element occurrences straight from CIF text site loops."""
    counts = {}
    for text in cif_texts:
        in_loop = False
        columns = []
        for line in text.splitlines():
            token = line.strip()
            if token == "loop_":
                in_loop = True
                columns = []
                continue
            if in_loop and token.startswith("_"):
                columns.append(token)
                continue
            if in_loop and token and not token.startswith(("_", "data_")):
                if "_atom_site_type_symbol" in columns:
                    sym = token.split()[columns.index("_atom_site_type_symbol")]
                    counts[sym] = counts.get(sym, 0) + 1
    return counts
