"""Test-only oracles."""
import numpy as np

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(f, arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        fp = f()
        flat[k] = old - step
        fm = f()
        flat[k] = old
        g[k] = (fp - fm) / (2.0 * step)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


# ------------------------------------------------------------------ common-path oracle

def brute_force_common(walks, n_sub: int, p: int):
    """Common edges and subgrids per cell, recounted from raw occupancy sequences.

    ``walks`` maps a cell id to ``(ped_id, sequence)`` pairs.  Every ordered
    pair (a, b), a != b, is tested against every pedestrian by scanning the
    raw sequence for an adjacent a, b.
    """
    out = {}
    for cell, recs in walks.items():
        edges = set()
        for a in range(n_sub):
            for b in range(n_sub):
                if a == b:
                    continue
                walkers = set()
                for pid, seq in recs:
                    if any(seq[k] == a and seq[k + 1] == b for k in range(len(seq) - 1)):
                        walkers.add(pid)
                if len(walkers) > p:
                    edges.add((a, b))
        out[cell] = (edges, {s for e in edges for s in e})
    return out


def mined_common(walks, p: int):
    """The same quantities through parse_subgrid_paths + mine_common_paths."""
    from scenetraj.grid import mine_common_paths, parse_subgrid_paths
    edges = {cell: [(pid, e) for pid, seq in recs for e in parse_subgrid_paths(seq)]
             for cell, recs in walks.items()}
    table = mine_common_paths(edges, p)
    return {cell: (table.cells[cell].common_edges, table.cells[cell].common_subgrids)
            for cell in walks}


def random_walks(rng, m: int, max_peds: int = 6, n_cells: int = 3, max_len: int = 6):
    """A small random instance; pedestrians may re-enter a cell (several sequences)."""
    n_sub = m * m
    walks = {}
    for cell in range(int(rng.integers(1, n_cells + 1))):
        recs = []
        for pid in range(int(rng.integers(0, max_peds + 1))):
            for _ in range(int(rng.integers(1, 3))):
                seq = rng.integers(0, n_sub, size=int(rng.integers(1, max_len + 1))).tolist()
                recs.append((pid, seq))
        walks[cell] = recs
    return walks


def exhaustive_walks(m: int = 2, max_peds: int = 6):
    """Every multiset of at most ``max_peds`` two-step walks in one cell."""
    from itertools import combinations_with_replacement
    n_sub = m * m
    seqs = [(a, b) for a in range(n_sub) for b in range(n_sub)]
    for k in range(max_peds + 1):
        for combo in combinations_with_replacement(range(len(seqs)), k):
            yield {0: [(pid, list(seqs[i])) for pid, i in enumerate(combo)]}


# ------------------------------------------------------------------ tiny model fixtures

def tiny_scene(n_peds: int = 60, seed: int = 0, layout: str = "tjunction", n: int = 2, m: int = 2,
               theta: float = 0.25, p: int = 1):
    """A small synthetic scene, its windows and grid artifacts."""
    from scenetraj.data import SynthSceneSpec, extract_windows, synth_generate
    from scenetraj.grid import GridSpec, build_grid_artifacts, scene_trajectories
    d = synth_generate(SynthSceneSpec(layout=layout, n_peds=n_peds, seed=seed))
    art = build_grid_artifacts(scene_trajectories(d), d.bounds, GridSpec(n, m), theta, p)
    return d, extract_windows(d), art


def tiny_params(art, hidden: int = 8, embed: int = 4, seed: int = 3):
    from scenetraj.model import ModelParams
    return ModelParams.init(hidden, embed, art.spec.n_sub, np.random.default_rng(seed),
                            np.random.default_rng(seed + 1))


def use_scene_steps(params, window, art, cfg) -> int:
    from scenetraj.model import TRAIN, SceneContext, rollout
    from scenetraj.nn import no_grad
    with no_grad():
        r = rollout(params, window, SceneContext(art, params.hidden, cfg), cfg, TRAIN)
    return int(sum(u.sum() for u in r.trace.used_scene))
