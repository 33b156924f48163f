"""Deterministic synthetic grid tasks with exact rule-based answers.

Two families probe opposite compression tolerances.

"Where" samples mark one cell by content linkage: the anchor cell at (0, 0)
holds a code that recurs in exactly one other cell, and the answer is that
twin's row and column. Decoy code pairs make the twin unidentifiable without
reading the anchor first, so locating it takes two dependent attention hops,
and any pooling kernel wider than one cell merges the twin's window and
destroys the coordinates.

"Majority" samples ask for the dominant cell code, generated so the answer
survives max-pooling of the code grid: the majority code is always the
numerically largest code present and holds at least sixty percent of the
cells, and every sample is verified against the configured kernels before it
is emitted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .kernels import ceil_div

GENERATOR_VERSION = 2

N_CODES = 8
MAX_GRID = 16
FILLER_CODE = 0                    # fine-task background
PAIR_CODES = (1, 2, 3, 4, 5)       # anchor/decoy codes for fine samples
BACKGROUND_CODES = N_CODES - 2     # coarse backgrounds drawn from 0..5
ANCHOR = (0, 0)

TOK_END = 0
TOK_ASK_WHERE = 1
TOK_ASK_MAJORITY = 2
TOK_VAL = 3                        # 3..10: answer token for code c is TOK_VAL + c
TOK_ROW = TOK_VAL + N_CODES        # 11..26
TOK_COL = TOK_ROW + MAX_GRID       # 27..42
VOCAB_SIZE = TOK_COL + MAX_GRID

TAG_FINE = "fine"
TAG_COARSE = "coarse"

# kernels every emitted coarse sample must survive (single and repeated)
GUARDED_KERNELS = ((1, 2), (2, 1), (2, 2), (4, 4))


@dataclass(frozen=True)
class SyntheticSample:
    grid: np.ndarray
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    tag: str
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def _check_extents(h: int, w: int):
    if h < 2 or w < 2:
        raise ContractError(f"grids must be at least 2x2, got {h}x{w}")
    if h > MAX_GRID or w > MAX_GRID:
        raise ContractError(f"grids are capped at {MAX_GRID}, got {h}x{w}")


# -- rules ------------------------------------------------------------------

def marker_position(grid: np.ndarray) -> tuple[int, int]:
    """Row and column of the unique marker cell."""
    rows, cols = np.nonzero(grid == MARKER_CODE)
    if len(rows) != 1:
        raise ContractError(f"grid has {len(rows)} marker cells, expected exactly one")
    return int(rows[0]), int(cols[0])


def majority_code(grid: np.ndarray) -> int:
    """Most frequent cell code; ties go to the lowest code."""
    return int(np.bincount(grid.reshape(-1), minlength=N_CODES).argmax())


def evaluate_rule(sample: SyntheticSample) -> tuple[int, ...]:
    """Recompute the answer from grid and prompt alone."""
    if sample.prompt[0] == TOK_ASK_WHERE:
        r, c = marker_position(sample.grid)
        return (TOK_ROW + r, TOK_COL + c)
    if sample.prompt[0] == TOK_ASK_MAJORITY:
        return (TOK_VAL + majority_code(sample.grid),)
    raise ContractError(f"unknown prompt {sample.prompt}")


def pool_codes(grid: np.ndarray, kernel: tuple[int, int]) -> np.ndarray:
    """Ceil-mode max pool of the raw code grid (the rule-level analogue)."""
    h, w = grid.shape
    kh, kw = kernel
    out = np.empty((ceil_div(h, kh), ceil_div(w, kw)), dtype=grid.dtype)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = grid[i * kh:(i + 1) * kh, j * kw:(j + 1) * kw].max()
    return out


def answer_survives_pooling(sample: SyntheticSample, kernel: tuple[int, int]) -> bool:
    """Whether the answer is still recoverable after pooling the code grid.

    For majority samples the rule is re-evaluated on the pooled grid and the
    pooled counts must keep a strict majority. For marker samples the answer
    survives only if the marker's window contains no other cell, since a
    merged window leaves the original coordinates ambiguous.
    """
    if sample.tag == TAG_COARSE:
        pooled = pool_codes(sample.grid, kernel)
        counts = np.bincount(pooled.reshape(-1), minlength=N_CODES)
        code = int(counts.argmax())
        strict = counts[code] * 2 > pooled.size
        return strict and (TOK_VAL + code,) == tuple(sample.answer)
    r, c = marker_position(sample.grid)
    h, w = sample.grid.shape
    kh, kw = kernel
    win_h = min((r // kh + 1) * kh, h) - (r // kh) * kh
    win_w = min((c // kw + 1) * kw, w) - (c // kw) * kw
    return win_h * win_w == 1


# -- generators ---------------------------------------------------------------

def gen_fine(seed: int, h: int, w: int) -> SyntheticSample:
    """One marker on a low-code background; answer encodes (row, col)."""
    _check_extents(h, w)
    rng = np.random.default_rng(seed)
    grid = rng.integers(0, BACKGROUND_CODES, size=(h, w), dtype=np.int64)
    r = int(rng.integers(0, h))
    c = int(rng.integers(0, w))
    grid[r, c] = MARKER_CODE
    return SyntheticSample(
        grid=grid,
        prompt=(TOK_ASK_WHERE,),
        answer=(TOK_ROW + r, TOK_COL + c),
        tag=TAG_FINE,
        seed=seed,
    )


def gen_coarse(seed: int, h: int, w: int) -> SyntheticSample:
    """Majority-code grid whose answer survives the guarded kernels."""
    _check_extents(h, w)
    rng = np.random.default_rng(seed)
    for _ in range(64):
        code = int(rng.integers(1, BACKGROUND_CODES))
        frac = rng.uniform(0.62, 0.9)
        n_major = max(int(np.ceil(frac * h * w)), int(np.ceil(0.6 * h * w)))
        cells = np.full(h * w, code, dtype=np.int64)
        cells[n_major:] = rng.integers(0, code, size=max(h * w - n_major, 0))
        rng.shuffle(cells)
        grid = cells.reshape(h, w)
        sample = SyntheticSample(
            grid=grid,
            prompt=(TOK_ASK_MAJORITY,),
            answer=(TOK_VAL + code,),
            tag=TAG_COARSE,
            seed=seed,
        )
        if majority_code(grid) != code:
            continue
        ok = True
        for kernel in GUARDED_KERNELS:
            if not answer_survives_pooling(sample, kernel):
                ok = False
                break
            twice = SyntheticSample(pool_codes(grid, kernel), sample.prompt,
                                    sample.answer, sample.tag, seed)
            if twice.grid.shape[0] >= 2 and twice.grid.shape[1] >= 2 and \
                    not answer_survives_pooling(twice, kernel):
                ok = False
                break
        if ok:
            return sample
    raise ContractError(f"could not generate a pooling-stable majority grid for seed {seed}")


def gen_sample(tag: str, seed: int, h: int, w: int) -> SyntheticSample:
    if tag == TAG_FINE:
        return gen_fine(seed, h, w)
    if tag == TAG_COARSE:
        return gen_coarse(seed, h, w)
    raise ContractError(f"unknown task tag {tag!r}")


def sample_stream(seed: int, h: int, w: int, fine_fraction: float = 0.5):
    """Endless deterministic mixture of the two families."""
    rng = np.random.default_rng(seed)
    i = 0
    while True:
        tag = TAG_FINE if rng.random() < fine_fraction else TAG_COARSE
        yield gen_sample(tag, seed * 1_000_003 + i, h, w)
        i += 1


def eval_set(seed: int, h: int, w: int, n: int) -> list[SyntheticSample]:
    """Balanced fixed evaluation set: alternating fine and coarse.

    Seeds sit in a range disjoint from sample_stream's so evaluation never
    replays training samples.
    """
    out = []
    for i in range(n):
        tag = TAG_FINE if i % 2 == 0 else TAG_COARSE
        out.append(gen_sample(seed=seed * 2_000_003 + 500_009 + i, tag=tag, h=h, w=w))
    return out


# -- serialization ------------------------------------------------------------

def dump_samples(samples, fh):
    for s in samples:
        fh.write(json.dumps({
            "generator_version": GENERATOR_VERSION,
            "seed": s.seed,
            "tag": s.tag,
            "grid": s.grid.tolist(),
            "prompt": list(s.prompt),
            "answer": list(s.answer),
        }) + "\n")


def load_samples(fh) -> list[SyntheticSample]:
    out = []
    for line in fh:
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["generator_version"] != GENERATOR_VERSION:
            raise ContractError(f"unsupported generator version {rec['generator_version']}")
        out.append(SyntheticSample(
            grid=np.array(rec["grid"], dtype=np.int64),
            prompt=tuple(rec["prompt"]),
            answer=tuple(rec["answer"]),
            tag=rec["tag"],
            seed=rec["seed"],
        ))
    return out
