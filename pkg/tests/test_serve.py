import numpy as np
import pytest

import mvke.data as D
import mvke.diffgraph as dg
import mvke.model as M
import mvke.serve as S
from mvke.errors import ConfigError
from mvke.model import Task


SMALL = dict(n_users=120, n_tags=20, n_ads=60, n_impressions=2500,
             n_test_impressions=600, seed=13)


@pytest.fixture(scope="module")
def served():
    with dg.precision("f32"):
        cfg = D.GeneratorConfig(**SMALL)
        train, test, _ = D.generate(cfg)
        mcfg = M.ModelConfig(schema=D.schema_for(cfg, embed_dim=8),
                             routing=M.five_expert_routing())
        model = M.MvkeModel(mcfg, seed=1)
        users = D.user_roster(test)
        tags = list(range(cfg.n_tags))
        model.reset_counters()
        caches = S.build_caches(model, users, tags)
        yield model, users, tags, caches


def test_build_cache_invocation_counts(served):
    model, users, tags, _ = served
    assert model.counters["user_tower"] == len(users)
    assert model.counters["tag_tower"] == len(tags) * 2


def test_user_cache_size_claim(served):
    model, users, _, caches = served
    user_cache, _ = caches
    k = model.cfg.routing.n_experts
    d = model.cfg.schema.embed_dim
    assert user_cache.vectors.shape == (len(users), k, d)
    assert user_cache.stored_values == k * len(users) * d


def test_cached_vectors_match_direct_expert_outputs(served):
    model, users, _, caches = served
    user_cache, _ = caches
    user_id, fields = users[7]
    with dg.precision("f32"):
        fe = M.embed_user_fields(fields, model.params, model.cfg.schema)
        for e in range(model.cfg.routing.n_experts):
            direct = M.vke_forward(fe, e, model.params).data
            np.testing.assert_allclose(user_cache.lookup(user_id)[e], direct,
                                       atol=1e-6)


def test_cached_scores_match_full_forward(served):
    model, users, tags, caches = served
    with dg.precision("f32"):
        rng = np.random.default_rng(0)
        for _ in range(60):
            user_id, fields = users[rng.integers(len(users))]
            tag = int(rng.integers(len(tags)))
            task = Task.CTR if rng.random() < 0.5 else Task.CVR
            cached = S.score_from_cache(user_id, tag, task, caches)
            full = model.pair_score(D.Example(user_id, fields, (tag,), 0, 0), task)
            assert cached == pytest.approx(full, abs=1e-6)


def test_cached_score_is_pure(served):
    _, users, _, caches = served
    once = S.score_from_cache(users[0][0], 3, Task.CVR, caches)
    twice = S.score_from_cache(users[0][0], 3, Task.CVR, caches)
    assert once == twice


def test_single_expert_task_reduces_to_cosine():
    with dg.precision("f32"):
        cfg = D.GeneratorConfig(**{**SMALL, "seed": 21})
        _, test, _ = D.generate(cfg)
        routing = M.ExpertRouting(2, ctr_experts=(0,), cvr_experts=(0, 1))
        mcfg = M.ModelConfig(schema=D.schema_for(cfg, embed_dim=8), routing=routing)
        model = M.MvkeModel(mcfg, seed=2)
        users = D.user_roster(test)[:10]
        caches = S.build_caches(model, users, [0, 1, 2])
        user_cache, tag_cache = caches
        tc = tag_cache[Task.CTR]
        got = S.score_from_cache(users[3][0], 1, Task.CTR, caches)
        vec = user_cache.lookup(users[3][0])[0]
        tag_vec = tc.embeddings[tc.row(1)]
        cos = vec @ tag_vec / (np.linalg.norm(vec) * np.linalg.norm(tag_vec))
        expected = 1.0 / (1.0 + np.exp(-tc.tau * cos))
        assert got == pytest.approx(float(expected), abs=1e-6)


def test_missing_ids_raise_lookup_error(served):
    _, _, _, caches = served
    with pytest.raises(KeyError):
        S.score_from_cache(10**9, 0, Task.CTR, caches)
    with pytest.raises(KeyError):
        S.score_from_cache(caches[0].user_ids[0], 10**9, Task.CTR, caches)


# ---------------------------------------------------------------------------
# top-k

def test_topk_full_ranking_when_n_is_tag_count(served):
    _, users, tags, caches = served
    assignment = S.assign_topk(caches, len(tags), Task.CTR)
    ranked = assignment.entries[users[0][0]]
    assert len(ranked) == len(tags)
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_topk_clamps_to_tag_count(served):
    _, users, tags, caches = served
    assignment = S.assign_topk(caches, len(tags) + 50, Task.CVR)
    assert all(len(v) == len(tags) for v in assignment.entries.values())


def test_topk_rejects_nonpositive_n(served):
    _, _, _, caches = served
    with pytest.raises(ConfigError):
        S.assign_topk(caches, 0, Task.CTR)


def test_topk_matches_brute_force_top1(served):
    model, users, tags, caches = served
    sub_users = users[:50]
    sub_tags = tags[:20]
    with dg.precision("f32"):
        naive = S.naive_scores(model, sub_users, sub_tags, Task.CTR)
    assignment = S.assign_topk(caches, 1, Task.CTR)
    for i, (user_id, _) in enumerate(sub_users):
        best_tag, best_score = assignment.entries[user_id][0]
        # brute-force argmax with the same tie convention
        order = np.lexsort((np.array(sub_tags), -naive[i]))
        assert best_tag == sub_tags[order[0]]
        assert best_score == pytest.approx(naive[i][order[0]], abs=1e-6)


def test_topk_ties_break_by_ascending_tag_id():
    user_cache = S.UserCache([1], np.ones((1, 2, 4)))
    tc = S.TaskTagCache(Task.CTR, [5, 2, 9],
                        embeddings=np.tile(np.ones(4), (3, 1)),
                        gate_weights=np.full((3, 2), 0.5),
                        expert_ids=(0, 1), tau=1.0)
    caches = (user_cache, S.TagCache({Task.CTR: tc}))
    ranked = S.assign_topk(caches, 3, Task.CTR).entries[1]
    assert [t for t, _ in ranked] == [2, 5, 9]  # all scores equal


def test_topk_invariant_to_roster_order(served):
    model, users, tags, _ = served
    with dg.precision("f32"):
        shuffled_users = list(reversed(users))
        shuffled_tags = list(reversed(tags))
        model.reset_counters()
        caches2 = S.build_caches(model, shuffled_users, shuffled_tags)
        a1 = S.assign_topk(S.build_caches(model, users, tags), 5, Task.CTR)
        a2 = S.assign_topk(caches2, 5, Task.CTR)
    for user_id in a1.entries:
        tags1 = [t for t, _ in a1.entries[user_id]]
        tags2 = [t for t, _ in a2.entries[user_id]]
        assert tags1 == tags2


def test_empty_tag_list_gives_empty_cache(served):
    model, users, _, _ = served
    with dg.precision("f32"):
        _, tag_cache = S.build_caches(model, users[:3], [])
    assert tag_cache[Task.CTR].tag_ids == []
    assert tag_cache[Task.CTR].embeddings.shape[0] == 0


# ---------------------------------------------------------------------------
# cache files

def test_cache_files_round_trip(tmp_path, served):
    model, users, tags, caches = served
    S.save_caches(caches, tmp_path / "caches")
    again = S.load_caches(tmp_path / "caches")
    np.testing.assert_array_equal(caches[0].vectors, again[0].vectors)
    assert caches[0].user_ids == again[0].user_ids
    for task in M.TASKS:
        np.testing.assert_array_equal(caches[1][task].gate_weights,
                                      again[1][task].gate_weights)
        assert caches[1][task].tau == again[1][task].tau
        assert caches[1][task].expert_ids == again[1][task].expert_ids
    # identical scores from reloaded caches
    u = users[0][0]
    assert (S.score_from_cache(u, 2, Task.CTR, caches)
            == S.score_from_cache(u, 2, Task.CTR, again))


def test_user_cache_file_size_is_header_plus_values(tmp_path, served):
    model, users, _, caches = served
    S.save_caches(caches, tmp_path / "caches")
    size = (tmp_path / "caches" / "user_cache.bin").stat().st_size
    k = model.cfg.routing.n_experts
    d = model.cfg.schema.embed_dim
    itemsize = caches[0].vectors.dtype.itemsize
    assert size == 24 + k * len(users) * d * itemsize


# ---------------------------------------------------------------------------
# bench

def test_bench_counter_formulas(served):
    model, users, tags, _ = served
    with dg.precision("f32"):
        rows = S.bench(model, users, tags, sizes=[(10, 6)])
    row = rows[0]
    assert row["naive_user_tower"] == 10 * 6 * 2
    assert row["naive_tag_tower"] == 10 * 6 * 2
    assert row["cached_user_tower"] == 10
    assert row["cached_tag_tower"] == 6 * 2
    assert row["naive_seconds"] > 0 and row["cached_seconds"] > 0


def test_bench_cached_counts_scale_linearly(served):
    model, users, tags, _ = served
    with dg.precision("f32"):
        rows = S.bench(model, users, tags, sizes=[(20, 6), (40, 6)])
    assert rows[1]["cached_user_tower"] == 2 * rows[0]["cached_user_tower"]
    assert rows[1]["cached_tag_tower"] == rows[0]["cached_tag_tower"]


def test_bench_rejects_oversized_request(served):
    model, users, tags, _ = served
    with pytest.raises(ConfigError):
        S.bench(model, users, tags, sizes=[(10**6, 5)])
