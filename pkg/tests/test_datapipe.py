"""Interaction IO, task building, shop classes, negative sampling, and the
synthetic generator."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest

from metashop.datapipe import (
    InteractionRecord,
    NegativeStrategy,
    ShopTask,
    SizeClass,
    SyntheticSpec,
    TaskUnit,
    attach_size_classes,
    attribute_fields,
    build_tasks,
    classify_shops,
    convert_ml1m,
    generate_synthetic,
    load_attributes,
    load_interactions,
    load_latents,
    negative_sample,
    save_attributes,
    save_interactions,
    save_latents,
)
from metashop.errors import ConfigError, DataError, SamplingError


def rec(u, i, s, y, ts=None, g=None):
    return InteractionRecord(u, i, s, float(y), ts, g)


class TestInteractionIO:
    def test_round_trip_with_optional_columns(self, tmp_path):
        records = [
            rec("u1", "i1", "s1", 1.0, 100, "ga"),
            rec("u2", "i2", "s1", 0.0, 101, "gb"),
            rec("u1", "i2", "s2", 3.5, 102, None),
        ]
        path = tmp_path / "x.csv"
        save_interactions(path, records)
        assert load_interactions(path) == records

    def test_round_trip_minimal_columns(self, tmp_path):
        records = [rec("u1", "i1", "s1", 1.0), rec("u2", "i1", "s1", 0.0)]
        path = tmp_path / "x.csv"
        save_interactions(path, records)
        text = path.read_text()
        assert "timestamp" not in text and "genre_l3" not in text
        assert load_interactions(path) == records

    def test_header_column_order_is_free(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text(
            "label,shop_id,user_id,item_id,genre_l3\n"
            "1.0,s1,u1,i1,ga\n"
            "0.0,s1,u2,i1,\n"
        )
        got = load_interactions(path)
        assert got[0] == rec("u1", "i1", "s1", 1.0, None, "ga")
        assert got[1].genre_l3 is None

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("user_id,item_id,shop_id,score\n")
        with pytest.raises(DataError, match="label"):
            load_interactions(path)

    def test_malformed_rows_reported_with_line_numbers(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text(
            "user_id,item_id,shop_id,label\n"
            "u1,i1,s1,1.0\n"
            "u2,i1,s1,oops\n"
            "u3,i1,s1,0.5\n"
            "u4,i1,s1\n"
            "u5,i1,s1,6.0\n"
        )
        with pytest.raises(DataError) as exc:
            load_interactions(path)
        msg = str(exc.value)
        assert "line 3" in msg and "line 4" in msg and "line 5" in msg
        assert "line 6" in msg and "4 malformed" in msg

    def test_duplicates_rejected(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text(
            "user_id,item_id,shop_id,label\n"
            "u1,i1,s1,1.0\n"
            "u1,i1,s1,1.0\n"
        )
        with pytest.raises(DataError, match="duplicate of line 2"):
            load_interactions(path)

    def test_same_pair_different_timestamp_is_fine(self, tmp_path):
        path = tmp_path / "x.csv"
        records = [rec("u1", "i1", "s1", 1.0, 5), rec("u1", "i1", "s1", 1.0, 6)]
        save_interactions(path, records)
        assert len(load_interactions(path)) == 2

    def test_missing_and_empty_files(self, tmp_path):
        with pytest.raises(DataError):
            load_interactions(tmp_path / "absent.csv")
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_interactions(empty)

    def test_record_validation(self):
        with pytest.raises(DataError):
            rec("", "i1", "s1", 1.0)
        with pytest.raises(DataError):
            rec("u1", "i1", "s1", -1.0)
        with pytest.raises(DataError):
            rec("u1", "i1", "s1", float("nan"))


def spread_records(n_shops=4, per_shop=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_shops):
        for e in range(per_shop):
            out.append(
                rec(
                    f"u{rng.integers(50)}",
                    f"i{s}_{e}",
                    f"s{s}",
                    int(rng.integers(2)),
                    ts=s * 1000 + e,
                )
            )
    return out


class TestBuildTasks:
    def test_sizes_and_disjointness(self):
        records = spread_records()
        tasks = build_tasks(records, min_interactions=13, support_size=10)
        assert len(tasks) == 4
        for t in tasks:
            assert len(t.support) == 10
            assert len(t.query) == 10
            assert not set(t.support) & set(t.query)
            assert {r.shop_id for r in (*t.support, *t.query)} == {t.shop_id}

    def test_small_groups_dropped(self):
        records = spread_records() + [rec("u1", "ix", "s_tiny", 1.0, ts=9999)]
        tasks = build_tasks(records)
        assert "s_tiny" not in {t.shop_id for t in tasks}

    def test_input_order_does_not_matter(self):
        records = spread_records(seed=3)
        rng = np.random.default_rng(5)
        shuffled = [records[i] for i in rng.permutation(len(records))]
        assert build_tasks(records, seed=11) == build_tasks(shuffled, seed=11)

    def test_seed_changes_the_split(self):
        records = spread_records(seed=4)
        a = build_tasks(records, seed=1)
        b = build_tasks(records, seed=2)
        assert a != b
        assert [t.shop_id for t in a] == [t.shop_id for t in b]

    def test_support_must_leave_room_for_queries(self):
        with pytest.raises(ConfigError):
            build_tasks(spread_records(), min_interactions=10, support_size=10)
        with pytest.raises(ConfigError):
            build_tasks(spread_records(), support_size=0)

    @pytest.mark.parametrize(
        "unit,attr", [(TaskUnit.ITEM, "item_id"), (TaskUnit.USER, "user_id")]
    )
    def test_other_task_units_group_by_their_key(self, unit, attr):
        rng = np.random.default_rng(8)
        records = [
            rec(f"u{rng.integers(3)}", f"i{rng.integers(3)}", f"s{rng.integers(4)}",
                1, ts=k)
            for k in range(200)
        ]
        tasks = build_tasks(records, min_interactions=13, support_size=5, task_unit=unit)
        assert tasks
        for t in tasks:
            assert {getattr(r, attr) for r in (*t.support, *t.query)} == {t.shop_id}


class TestShopClasses:
    def test_four_existing_shops_one_large(self):
        train = []
        for s, n in (("a", 10), ("b", 20), ("c", 30), ("d", 40)):
            train += [rec(f"u{k}", f"i{k}", s, 1.0) for k in range(n)]
        test = [rec("u1", "ix", s, 1.0) for s in ("a", "b", "c", "d", "zz")]
        stats = classify_shops(train, test)
        assert stats.taxonomy == {
            "a": SizeClass.SMALL,
            "b": SizeClass.SMALL,
            "c": SizeClass.SMALL,
            "d": SizeClass.LARGE,
            "zz": SizeClass.NEW,
        }
        assert stats.counts[SizeClass.LARGE] == 1

    def test_sales_count_positives_only(self):
        train = [rec("u1", "i1", "a", 1.0), rec("u2", "i1", "a", 0.0)]
        stats = classify_shops(train, [])
        assert stats.sales == {"a": 1}

    def test_ties_break_toward_smaller_id(self):
        train = [rec(f"u{k}", f"i{k}", s, 1.0) for s in ("a", "b") for k in range(5)]
        test = [rec("u1", "ix", s, 1.0) for s in ("a", "b")]
        stats = classify_shops(train, test)
        assert stats.taxonomy["a"] is SizeClass.LARGE
        assert stats.taxonomy["b"] is SizeClass.SMALL

    def test_median_rule_is_strict(self):
        train = []
        for s, n in (("a", 1), ("b", 2), ("c", 4)):
            train += [rec(f"u{k}", f"i{k}", s, 1.0) for k in range(n)]
        stats = classify_shops(train, [])
        assert stats.median_sales == 2.0
        assert stats.small_sampling == frozenset({"a"})
        assert stats.sampling_class("a") is SizeClass.SMALL
        assert stats.sampling_class("b") is SizeClass.LARGE
        with pytest.raises(DataError):
            stats.sampling_class("ghost")

    def test_partition_invariants_random_worlds(self):
        for trial in range(30):
            rng = np.random.default_rng(trial)
            n_shops = int(rng.integers(2, 12))
            train = []
            for s in range(n_shops):
                train += [
                    rec(f"u{k}", f"i{s}_{k}", f"s{s}", 1.0)
                    for k in range(int(rng.integers(1, 40)))
                ]
            test_shops = [f"s{s}" for s in range(n_shops) if rng.random() < 0.7]
            test_shops += [f"n{j}" for j in range(int(rng.integers(0, 3)))]
            test = [rec("u0", "ix", s, 1.0) for s in test_shops]
            stats = classify_shops(train, test)
            assert set(stats.taxonomy) == set(test_shops)
            existing = [s for s in test_shops if not s.startswith("n")]
            n_large = sum(
                1 for s in existing if stats.taxonomy[s] is SizeClass.LARGE
            )
            assert n_large == math.ceil(0.25 * len(existing))
            for s in test_shops:
                if s.startswith("n"):
                    assert stats.taxonomy[s] is SizeClass.NEW

    def test_attach_size_classes(self):
        train = []
        for s, n in (("a", 2), ("b", 6), ("c", 20)):
            train += [rec(f"u{k}", f"i{s}{k}", s, 1.0, ts=k) for k in range(n)]
        test = [rec("u9", "ix", s, 1.0) for s in ("a", "c", "zz")]
        stats = classify_shops(train, test)
        t_a = ShopTask("a", train[:1], train[1:2])
        t_b = ShopTask("b", train[2:3], train[3:4])
        sized = attach_size_classes([t_a, t_b], stats, use_taxonomy=False)
        assert sized[0].size_class is SizeClass.SMALL  # 2 < median 6
        # strictness: shop b sits exactly on the median and counts LARGE
        assert stats.median_sales == 6.0
        assert sized[1].size_class is SizeClass.LARGE
        eval_task = ShopTask("zz", train[:1], train[1:2])
        sized_eval = attach_size_classes([eval_task], stats, use_taxonomy=True)
        assert sized_eval[0].size_class is SizeClass.NEW
        with pytest.raises(DataError):
            attach_size_classes([t_b], stats, use_taxonomy=True)


def genre_world():
    """Two genres spread over two shops, enough users for clean pools."""
    records = []
    for k in range(12):
        records.append(rec(f"ua{k}", f"ia{k % 4}", "big", 1.0, ts=k, g="ga"))
    for k in range(6):
        records.append(rec(f"ub{k}", f"ib{k % 3}", "tiny", 1.0, ts=100 + k, g="gb"))
    stats = classify_shops(records, [])
    return records, stats


class TestNegativeSampling:
    def test_n0_users_bought_another_genre(self):
        records, stats = genre_world()
        negs = negative_sample(records, NegativeStrategy.N0, stats, ratio=1.0, seed=3)
        assert len(negs) == len(records)
        genres_of = {}
        for r in records:
            genres_of.setdefault(r.user_id, set()).add(r.genre_l3)
        positives = {(r.item_id, r.user_id) for r in records}
        seen = set()
        for n in negs:
            assert n.label == 0.0
            assert (n.item_id, n.user_id) not in positives
            assert (n.item_id, n.user_id) not in seen
            seen.add((n.item_id, n.user_id))
            assert genres_of[n.user_id] - {n.genre_l3}

    def test_ratio_and_determinism(self):
        records, stats = genre_world()
        a = negative_sample(records, NegativeStrategy.N0, stats, ratio=0.5, seed=9)
        assert len(a) == round(0.5 * len(records))
        b = negative_sample(records, NegativeStrategy.N0, stats, ratio=0.5, seed=9)
        assert a == b
        c = negative_sample(records, NegativeStrategy.N0, stats, ratio=0.5, seed=10)
        assert a != c

    def test_single_genre_pool_exhausts(self):
        records = [rec(f"u{k}", "ix", "s1", 1.0, g="ga") for k in range(5)]
        stats = classify_shops(records, [])
        with pytest.raises(SamplingError, match="ix"):
            negative_sample(records, NegativeStrategy.N0, stats, seed=1)

    def test_genre_required(self):
        records = [rec("u1", "i1", "s1", 1.0)]
        stats = classify_shops(records, [])
        with pytest.raises(DataError, match="genre_l3"):
            negative_sample(records, NegativeStrategy.N0, stats)

    def test_n2_on_large_shops_replays_n0(self):
        # every positive comes from the large shop, so strategy resolution
        # must consume no randomness and the two draws agree bitwise
        rng = np.random.default_rng(0)
        train = []
        for k in range(300):
            train.append(
                rec(f"u{k % 60}", f"i{k % 40}", "big", 1.0, ts=k,
                    g=f"g{(k % 40) % 4}")
            )
        train += [rec(f"v{k}", f"j{k}", "tiny", 1.0, ts=1000 + k, g="ga")
                  for k in range(10)]
        stats = classify_shops(train, [])
        assert stats.sampling_class("big") is SizeClass.LARGE
        positives = [r for r in train if r.shop_id == "big"]
        # dedupe (user, item) pairs so the pool bookkeeping stays simple
        uniq = {}
        for r in positives:
            uniq.setdefault((r.user_id, r.item_id), r)
        positives = list(uniq.values())
        n0 = negative_sample(positives, NegativeStrategy.N0, stats, ratio=4.0, seed=6)
        n2 = negative_sample(positives, NegativeStrategy.N2, stats, ratio=4.0, seed=6)
        assert len(n0) == 4 * len(positives) == 480
        assert n0 == n2

    def test_n1_coin_is_roughly_fair(self):
        # small-shop purchasers only ever buy genre ga; the other-genre pool
        # for ga is exactly the large-shop gb buyers, so the two pools are
        # disjoint and every draw reveals which side the coin chose
        n_small, n_large = 4000, 8000
        records = []
        for k in range(n_small):
            records.append(rec(f"sa{k}", f"ia{k}", "tiny", 1.0, ts=k, g="ga"))
        for k in range(n_large):
            records.append(
                rec(f"ob{k}", f"ib{k}", "big", 1.0, ts=n_small + k, g="gb")
            )
        stats = classify_shops(records, [])
        assert stats.sampling_class("tiny") is SizeClass.SMALL
        negs = negative_sample(records, NegativeStrategy.N1, stats, ratio=1.0, seed=2)
        ga_draws = [n for n in negs if n.item_id.startswith("ia")]
        assert len(ga_draws) == n_small
        small_picks = sum(1 for n in ga_draws if n.user_id.startswith("sa"))
        for n in ga_draws:
            assert n.user_id.startswith(("sa", "ob"))
        assert 0.45 < small_picks / len(ga_draws) < 0.55


class TestLatentsAndAttributes:
    def test_latents_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        users = {"u1": rng.normal(size=3), "u2": rng.normal(size=3)}
        items = {"i1": rng.normal(size=3)}
        effects = {"s1": rng.normal(size=3)}
        path = tmp_path / "latents.csv"
        save_latents(path, users, items, effects)
        table, shops = load_latents(path)
        for k, v in users.items():
            np.testing.assert_array_equal(table.user_raw(k), v)
        np.testing.assert_array_equal(table.item_raw("i1"), items["i1"])
        np.testing.assert_array_equal(shops["s1"], effects["s1"])
        with pytest.raises(DataError):
            table.user_raw("ghost")

    def test_latents_validation(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("kind,id,v0\nuser,u1,abc\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_latents(bad)
        bad.write_text("kind,id,v0\nplanet,x,1.0\n")
        with pytest.raises(DataError, match="unknown kind"):
            load_latents(bad)
        bad.write_text("kind,id,v0\nuser,u1,1.0\n")
        with pytest.raises(DataError, match="user and item"):
            load_latents(bad)

    def test_attributes_round_trip(self, tmp_path):
        table = {
            "u1": {"age": "25", "gender": "F"},
            "u2": {"age": "3", "gender": "M"},
        }
        path = tmp_path / "attrs.csv"
        save_attributes(path, table, "user_id")
        assert load_attributes(path) == table
        fields = attribute_fields(table)
        assert fields == [("age", ["25", "3"]), ("gender", ["F", "M"])]


class TestSynthetic:
    def test_partition_and_new_shops(self):
        spec = SyntheticSpec(seed=3)
        data = generate_synthetic(spec)
        train_set, test_set = set(data.train), set(data.test)
        assert not train_set & test_set
        assert len(data.new_shops) == spec.n_new_shops
        train_shops = {r.shop_id for r in data.train}
        test_shops = {r.shop_id for r in data.test}
        for s in data.new_shops:
            assert s not in train_shops
            assert s in test_shops
        assert len(train_shops) == spec.n_shops - spec.n_new_shops

    def test_every_shop_reaches_minimum_size(self):
        spec = SyntheticSpec(seed=4, min_shop_size=30)
        data = generate_synthetic(spec)
        sizes = Counter(r.shop_id for r in data.train + data.test)
        assert len(sizes) == spec.n_shops
        assert min(sizes.values()) >= 30

    def test_power_law_concentrates_interactions(self):
        data = generate_synthetic(SyntheticSpec(seed=0, pareto_exponent=0.6))
        sizes = sorted(
            Counter(r.shop_id for r in data.train + data.test).values(),
            reverse=True,
        )
        top = math.ceil(0.25 * len(sizes))
        assert sum(sizes[:top]) / sum(sizes) > 0.6

    def test_bitwise_determinism(self):
        a = generate_synthetic(SyntheticSpec(seed=11))
        b = generate_synthetic(SyntheticSpec(seed=11))
        assert a.train == b.train and a.test == b.test
        for k in a.features.users:
            np.testing.assert_array_equal(
                a.features.users[k], b.features.users[k]
            )
        c = generate_synthetic(SyntheticSpec(seed=12))
        assert a.train != c.train

    def test_timestamps_unique_and_split_temporal(self):
        data = generate_synthetic(SyntheticSpec(seed=5))
        everything = data.train + data.test
        stamps = [r.timestamp for r in everything]
        assert len(set(stamps)) == len(stamps)
        last_train = {}
        first_test = {}
        for r in data.train:
            last_train[r.shop_id] = max(last_train.get(r.shop_id, -1), r.timestamp)
        for r in data.test:
            first_test[r.shop_id] = min(
                first_test.get(r.shop_id, 1 << 60), r.timestamp
            )
        for s, last in last_train.items():
            assert last < first_test[s]

    def test_records_carry_genres_and_binary_labels(self):
        data = generate_synthetic(SyntheticSpec(seed=6))
        everything = data.train + data.test
        labels = {r.label for r in everything}
        assert labels == {0.0, 1.0}
        genres = {r.genre_l3 for r in everything}
        assert None not in genres and len(genres) >= 2
        # every item lives in exactly one shop
        item_shop = {}
        for r in everything:
            assert item_shop.setdefault(r.item_id, r.shop_id) == r.shop_id

    def test_latent_tables_complete_and_persistable(self, tmp_path):
        spec = SyntheticSpec(seed=7, n_users=40, n_items=30, n_shops=5,
                             interactions_per_shop=80, n_new_shops=1)
        data = generate_synthetic(spec)
        assert len(data.features.users) == 40
        assert len(data.features.items) == 30
        assert len(data.shop_effects) == 5
        assert all(v.shape == (spec.latent_dim,) for v in data.shop_effects.values())
        path = tmp_path / "latents.csv"
        save_latents(path, data.features.users, data.features.items,
                     data.shop_effects)
        table, shops = load_latents(path)
        for k, v in data.features.items.items():
            np.testing.assert_array_equal(table.item_raw(k), v)
        some_shop = sorted(data.shop_effects)[0]
        np.testing.assert_array_equal(
            shops[some_shop], data.shop_effects[some_shop]
        )

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(n_new_shops=20, n_shops=20)
        with pytest.raises(ConfigError):
            SyntheticSpec(test_fraction=1.5)
        with pytest.raises(ConfigError):
            SyntheticSpec(n_items=5, n_shops=10)


class TestMl1mConversion:
    def write_fake(self, src):
        src.mkdir()
        (src / "movies.dat").write_text(
            "1::Toy Story (1995)::Animation|Children's\n"
            "2::Old Film (1990)::Drama\n"
            "3::New Film (1999)::Drama\n"
            "4::No Year Film::Comedy\n"
            "5::Frontier (2000)::Western\n",
            encoding="latin-1",
        )
        (src / "users.dat").write_text(
            "1::F::25::10::55117\n2::M::35::7::02139\n", encoding="latin-1"
        )
        (src / "ratings.dat").write_text(
            "1::1::5::978300760\n"
            "1::3::4::978300761\n"
            "2::2::3::978300762\n"
            "2::5::2::978300763\n"
            "1::99::5::978300764\n",
            encoding="latin-1",
        )

    def test_conversion(self, tmp_path):
        src = tmp_path / "ml-1m"
        out = tmp_path / "out"
        self.write_fake(src)
        counts = convert_ml1m(src, out, train_before_year=1998)
        assert counts == {
            "train_records": 2,
            "test_records": 2,
            "holdout_shops": 1,
            "movies_without_year": 1,
            "ratings_without_movie": 1,
        }
        train = load_interactions(out / "train.csv")
        test = load_interactions(out / "test.csv")
        assert {r.item_id for r in train} == {"m1", "m2"}
        assert {r.shop_id for r in train} == {"Animation", "Drama"}
        assert {r.shop_id for r in test} == {"Drama", "Western"}
        assert all(r.genre_l3 == r.shop_id for r in train + test)
        assert {r.label for r in train} == {5.0, 3.0}
        users = load_attributes(out / "user_attrs.csv")
        assert users["u1"]["zip_region"] == "5"
        items = load_attributes(out / "item_attrs.csv")
        assert items["m5"]["year"] == "2000"

    def test_explicit_holdout(self, tmp_path):
        src = tmp_path / "ml-1m"
        out = tmp_path / "out"
        self.write_fake(src)
        convert_ml1m(src, out, holdout_shops=["Drama"], train_before_year=1998)
        train = load_interactions(out / "train.csv")
        assert {r.shop_id for r in train} == {"Animation"}

    def test_missing_source(self, tmp_path):
        with pytest.raises(DataError, match="ratings.dat"):
            convert_ml1m(tmp_path, tmp_path / "out")
