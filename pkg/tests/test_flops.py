import numpy as np
import pytest

from dynpool import (DpnModel, FlopsMeter, FrozenDecision, ModelDims, PoolingExpert,
                     PyramidConfig, SequenceLayout, layer_flops, schedule_flops)
from dynpool.dpe import dpn_forward
from dynpool.errors import ContractError, StateError
from dynpool.kernels import ceil_div
import dynpool.tasks as tasks

KERNEL_CHOICES = [(1, 1), (1, 2), (2, 1), (2, 2), (4, 4)]


def brute_force_schedule(n_layers, d, m, layout, plan):
    """Independent per-layer summation: plan maps layer -> kernel."""
    grid = (layout.grid_h, layout.grid_w)
    rest = layout.text_len + 1 + layout.answer_len
    total = 0
    per_layer_n = []
    for i in range(n_layers):
        if i in plan:
            kh, kw = plan[i]
            grid = (ceil_div(grid[0], kh), ceil_div(grid[1], kw))
        n = grid[0] * grid[1] + rest
        per_layer_n.append(n)
        total += 4 * n * d * d + 2 * n * n * d + 2 * n * d * m
    return total, per_layer_n


def test_layer_flops_zero_tokens():
    assert layer_flops(0, 64, 128) == 0


def test_layer_flops_hand_value():
    # 4*8*16 + 2*64*4 + 2*8*4*8 = 512 + 512 + 512
    assert layer_flops(8, 4, 8) == 1536


def test_layer_flops_large_model_scale():
    # frozen from an independent big-integer computation
    assert layer_flops(576, 4096, 11008) == 93_314_875_392


def test_layer_flops_rejects_bad_extents():
    with pytest.raises(ContractError):
        layer_flops(-1, 4, 4)
    with pytest.raises(ContractError):
        layer_flops(4, 0, 4)


def test_schedule_identity_decisions_ratio_one():
    lo = SequenceLayout(6, 6, 4, 2)
    report = schedule_flops(4, 16, 32, lo, dpe_layers=(1, 2),
                            decisions=[(1, 1), (1, 1)])
    assert report.total == report.baseline_total
    assert report.ratio == 1.0


def test_schedule_midpoint_quarter_pooling():
    lo = SequenceLayout(8, 8, 2, 0)   # visual-dominated sequence
    n_layers, d, m = 6, 16, 32
    report = schedule_flops(n_layers, d, m, lo, dpe_layers=(3,), decisions=[(2, 2)])
    assert 0.25 < report.ratio < 1.0
    expected_total, expected_n = brute_force_schedule(n_layers, d, m, lo, {3: (2, 2)})
    assert report.total == expected_total
    assert [lc.n_tokens for lc in report.per_layer] == expected_n


def test_schedule_paper_scale_ratio_window():
    # 32 layers, 576 visual + 30 text + 1 routing, quarter pooling at 8/16/24
    lo = SequenceLayout(24, 24, 30, 0)
    report = schedule_flops(32, 4096, 11008, lo, dpe_layers=(8, 16, 24),
                            decisions=[(2, 2)] * 3)
    assert 0.25 < report.ratio < 0.50
    # frozen from the independent big-integer script
    assert report.total == 1_145_173_639_168
    assert report.baseline_total == 3_151_717_728_256


def test_schedule_requires_matching_decisions():
    lo = SequenceLayout(4, 4, 1, 0)
    with pytest.raises(ContractError):
        schedule_flops(4, 8, 16, lo, dpe_layers=(1, 2), decisions=[(2, 2)])
    with pytest.raises(ContractError):
        schedule_flops(2, 8, 16, lo, dpe_layers=(5,), decisions=[(2, 2)])


def test_ratio_monotone_in_added_compression():
    lo = SequenceLayout(8, 8, 3, 1)
    base = schedule_flops(6, 16, 32, lo, dpe_layers=(2,), decisions=[(1, 2)])
    more_layers = schedule_flops(6, 16, 32, lo, dpe_layers=(2, 4), decisions=[(1, 2), (2, 2)])
    stronger = schedule_flops(6, 16, 32, lo, dpe_layers=(2,), decisions=[(2, 2)])
    assert more_layers.ratio <= base.ratio
    assert stronger.ratio <= base.ratio


def test_ratio_bounds_visual_only():
    # with no text or answer tokens the ratio is bounded by the squared
    # compression product below (the attention term is quadratic) and 1 above
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, w = rng.integers(2, 9, size=2)
        lo = SequenceLayout(int(h), int(w), 0, 0)
        n_layers = int(rng.integers(2, 7))
        stages = sorted(rng.choice(n_layers, size=min(2, n_layers), replace=False))
        kernels = [KERNEL_CHOICES[i] for i in rng.integers(1, len(KERNEL_CHOICES), size=len(stages))]
        report = schedule_flops(n_layers, 8, 16, lo,
                                dpe_layers=tuple(int(s) for s in stages), decisions=kernels)
        c_prod = np.prod([kh * kw for kh, kw in kernels])
        assert 1.0 / c_prod ** 2 <= report.ratio <= 1.0


def test_meter_requires_a_run():
    meter = FlopsMeter()
    with pytest.raises(StateError):
        meter.total


def test_meter_empty_forward_counts_zero():
    with FlopsMeter() as meter:
        pass
    assert meter.total == 0


def random_config(rng):
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.choice([4, 8]))
    dims = ModelDims(
        n_layers=int(rng.integers(1, 9)), d=d, n_heads=heads,
        m=int(rng.integers(4, 65)), vocab=tasks.VOCAB_SIZE,
        max_grid=(8, 8), max_seq=128, n_pixel_codes=tasks.N_CODES)
    n_dpe = int(rng.integers(0, min(dims.n_layers, 3) + 1))
    dpe_layers = tuple(sorted(int(i) for i in rng.choice(dims.n_layers, size=n_dpe, replace=False)))
    experts = tuple(PoolingExpert(k, float(k[0] * k[1])) for k in KERNEL_CHOICES)
    pyramid = PyramidConfig(dpe_layers=dpe_layers, experts=experts)
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    text = int(rng.integers(0, 6))
    answer = int(rng.integers(0, 4))
    selections = [int(rng.integers(0, len(experts))) for _ in dpe_layers]
    return dims, pyramid, h, w, text, answer, selections


@pytest.mark.parametrize("seed", range(60))
def test_measured_equals_schedule_exactly(seed):
    rng = np.random.default_rng(seed)
    dims, pyramid, h, w, text, answer, selections = random_config(rng)
    model = DpnModel(dims, pyramid, seed=seed)
    grid = rng.integers(0, tasks.N_CODES, size=(h, w))
    text_ids = list(rng.integers(0, dims.vocab, size=text))
    answer_ids = list(rng.integers(0, dims.vocab, size=answer))
    z, layout = model.embed_sequence(grid, text_ids, answer_ids)
    frozen = tuple(FrozenDecision(layer, sel, 1.0)
                   for layer, sel in zip(pyramid.dpe_layers, selections))
    with FlopsMeter() as meter:
        dpn_forward(model, z, layout, frozen=frozen)
    report = schedule_flops(dims.n_layers, dims.d, dims.m, layout,
                            dpe_layers=pyramid.dpe_layers,
                            decisions=[pyramid.experts[s] for s in selections])
    assert meter.total == report.total


def test_measured_single_layer_matches_formula():
    dims = ModelDims(n_layers=1, d=8, n_heads=2, m=12, vocab=tasks.VOCAB_SIZE,
                     max_grid=(4, 4), max_seq=64, n_pixel_codes=tasks.N_CODES)
    model = DpnModel(dims, PyramidConfig(dpe_layers=()), seed=0)
    sample = tasks.gen_fine(0, 3, 3)
    z, layout = model.embed_sequence(sample.grid, sample.prompt, [])
    with FlopsMeter() as meter:
        model.forward_plain(z, layout)
    assert meter.total == layer_flops(layout.total_len, dims.d, dims.m)
