import dataclasses
import json

import numpy as np
import pytest
import torch

from icsynergy.ctxopt import (
    Chromosome,
    ContextProblem,
    ContractError,
    GAConfig,
    best_of_budget_random,
    error_reduction,
    load_contexts,
    run_ga,
    save_contexts,
)
from icsynergy.dataset import make_fewshot_split, make_optimization_split
from icsynergy.model import ModelConfig, build_model
from icsynergy.synthgen import sample_dataset, sample_world
from icsynergy.train import ConfigError

N_CTX = 3


@pytest.fixture(scope="module")
def setup():
    w = sample_world(20, 3, 4, seed=0)
    data = sample_dataset(w, 800, seed=0)
    split = make_optimization_split(data, m=3, mode="unknown-drug", seed=0)
    cfg = ModelConfig(20, 3, d_model=16, n_layers=1, n_heads=2, max_ctx_examples=N_CTX, retrieval_dim=4)
    model = build_model(cfg, seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.5 * torch.randn_like(p))  # random but opinionated predictor
    return model, split


def _valid(problem, chrom):
    bank = problem.split.context_bank
    assert [h for h, _ in chrom.blocks] == list(problem.heads)
    for h, genes in chrom.blocks:
        assert len(genes) == N_CTX and len(set(genes)) == N_CTX
        assert all(h in bank[g].drugs() for g in genes)


def test_identical_blocks_identical_fitness(setup):
    model, split = setup
    p1 = ContextProblem(model, split, N_CTX)
    p2 = ContextProblem(model, split, N_CTX)
    c = p1.random_chromosome(np.random.default_rng(0))
    clone = Chromosome.from_map(c.as_map())
    assert p1.fitness(c) == p2.fitness(clone)


def test_fitness_is_pure(setup):
    model, split = setup
    p = ContextProblem(model, split, N_CTX)
    c = p.random_chromosome(np.random.default_rng(1))
    before = [t.detach().clone() for t in model.parameters()]
    a = p.fitness(c)
    p._cache.clear()
    assert p.fitness(c) == a
    assert all(torch.equal(x, y) for x, y in zip(before, model.parameters()))


def test_two_point_validation_auc_is_discrete(setup):
    model, split = setup
    pos = next(i for i in split.val_idx if split.tuples[i].label == 1)
    neg = next(i for i in split.val_idx if split.tuples[i].label == 0)
    p = ContextProblem(model, dataclasses.replace(split, val_idx=(pos, neg)), N_CTX)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert p.fitness(p.random_chromosome(rng)) in (0.0, 0.5, 1.0)


def test_empty_validation_is_contract_error(setup):
    model, split = setup
    few = make_fewshot_split(list(split.tuples), m=3, n=5, mode="unknown-drug", seed=0)
    with pytest.raises(ContractError):
        ContextProblem(model, few, N_CTX)


def test_short_bank_names_entity(setup):
    model, split = setup
    with pytest.raises(ConfigError, match=r"held-out entity \d+"):
        ContextProblem(model, split, 10_000)


def test_ga_config_invariants():
    with pytest.raises(ConfigError):
        GAConfig(population=3, parents=4)
    with pytest.raises(ConfigError):
        GAConfig(parents=1)


@pytest.fixture(scope="module")
def ga_run(setup):
    model, split = setup
    problem = ContextProblem(model, split, N_CTX)
    return problem, run_ga(problem, GAConfig(epochs=10), seed=3)


def test_ga_running_best_is_monotone(ga_run):
    problem, res = ga_run
    best = [r["best"] for r in res.trace]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert res.best_fitness == max(r["fitness"] for r in res.trace) == best[-1]
    assert res.best_fitness >= res.initial_best
    assert problem.fitness(res.best) == res.best_fitness


def test_ga_offspring_respect_invariants(ga_run):
    problem, res = ga_run
    _valid(problem, res.best)
    for c in res.population:
        _valid(problem, c)


def test_ga_eval_count_measured(ga_run):
    problem, res = ga_run
    assert len(res.trace) == 8 + 10 * 7
    assert 1 <= res.evaluations <= len(res.trace)
    assert res.evaluations == sum(1 for which, _ in problem._cache if which == "validation")


def test_ga_deterministic(setup, ga_run):
    model, split = setup
    _, res = ga_run
    again = run_ga(ContextProblem(model, split, N_CTX), GAConfig(epochs=10), seed=3)
    assert again.best == res.best and again.trace == res.trace


def test_clone_population_without_mutation_is_fixed(setup):
    model, split = setup
    problem = ContextProblem(model, split, N_CTX)
    c = problem.random_chromosome(np.random.default_rng(5))
    res = run_ga(problem, GAConfig(epochs=6, mutation_rate=0.0), seed=0, initial=[c] * 8)
    assert all(m == c for m in res.population)
    assert len({r["fitness"] for r in res.trace}) == 1
    assert res.evaluations == 1


def test_random_budget(setup):
    model, split = setup
    problem = ContextProblem(model, split, N_CTX)
    r = best_of_budget_random(problem, 12, seed=1)
    assert len(r.fitnesses) == 12
    assert r.mean <= r.max == problem.fitness(r.best)
    _valid(problem, r.best)
    again = best_of_budget_random(ContextProblem(model, split, N_CTX), 12, seed=1)
    assert again.fitnesses == r.fitnesses and again.best == r.best
    one = best_of_budget_random(problem, 1, seed=2)
    assert one.mean == one.max


def _confident_model(setup):
    model, split = setup
    perfect = build_model(model.config, seed=0)
    with torch.no_grad():
        perfect.synergy_head.weight.zero_()
        perfect.synergy_head.bias.fill_(60.0)  # always predicts synergy with certainty
    positives = tuple(i for i in split.val_idx if split.tuples[i].label == 1)
    return perfect, dataclasses.replace(split, val_idx=positives)


def test_error_reduction_zero_error_and_tie_rule(setup):
    model, split = _confident_model(setup)
    problem = ContextProblem(model, split, N_CTX)
    res = error_reduction(problem, budget=2, seed=0)
    _valid(problem, res.chromosome)
    for h, genes in res.chromosome.blocks:
        means = res.mean_error[h]
        assert all(v == 0.0 for v in means.values())
        if len(means) >= N_CTX:
            # every sampled example ties at zero, so the lowest positions win
            assert list(genes) == sorted(means)[:N_CTX]


def test_error_reduction_only_sampled_examples_qualify(setup):
    model, split = setup
    problem = ContextProblem(model, split, N_CTX)
    res = error_reduction(problem, budget=1, seed=4)
    for h, genes in res.chromosome.blocks:
        if len(res.mean_error[h]) >= N_CTX:
            assert set(genes) <= set(res.mean_error[h])
            worst_chosen = max(res.mean_error[h][g] for g in genes)
            others = [v for g, v in res.mean_error[h].items() if g not in genes]
            assert all(v >= worst_chosen for v in others)


def test_context_export_roundtrip(tmp_path, ga_run):
    _, res = ga_run
    save_contexts(tmp_path / "ctx.json", res.best)
    loaded = load_contexts(tmp_path / "ctx.json")
    assert Chromosome.from_map(loaded) == res.best
    raw = json.loads((tmp_path / "ctx.json").read_text())
    assert all(isinstance(k, str) and isinstance(v, list) for k, v in raw.items())
    res.write_trace(tmp_path / "trace.jsonl")
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) == len(res.trace) and json.loads(lines[0])["eval"] == 0
