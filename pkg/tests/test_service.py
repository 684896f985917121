"""Campaign assignment, append-only log behavior, and the HTTP layer."""

import json
import threading
import urllib.error
import urllib.request

import pytest

from iconika.datamodel import load_dataset
from iconika.service import (
    Campaign,
    CampaignConfig,
    CampaignError,
    SubmissionError,
    build_assignment,
    make_server,
    read_ratings_log,
)
from synth import write_dataset


@pytest.fixture
def campaign(tmp_path):
    manifest = write_dataset(tmp_path / "data", n_classes=4, per_class=20, B=5, seed=1)
    dataset = load_dataset(manifest)
    config = CampaignConfig(
        B=5,
        classes_per_annotator=4,
        shared_set_size=10,
        shared_classes=2,
        redundancy_groups={"g1": ["a1", "a2"]},
        roles={"a1": "train-campaign", "a2": "train-campaign", "t1": "test-campaign"},
    )
    assignment = build_assignment(dataset, config, seed=0)
    return Campaign(assignment, tmp_path / "ratings.log", config), dataset, tmp_path


def submit_next(campaign, annotator, value=1):
    batch = campaign.next_batch(annotator)
    assert batch is not None
    ratings = [(image_id, value) for image_id in batch.image_ids]
    campaign.submit_ratings(annotator, batch.batch_id, ratings)
    return batch


class TestAssignment:
    def test_group_shares_first_batches(self, campaign):
        camp, _, _ = campaign
        shared_a1 = [tuple(b.image_ids) for b in camp.assignment["a1"][:2]]
        shared_a2 = [tuple(b.image_ids) for b in camp.assignment["a2"][:2]]
        assert shared_a1 == shared_a2

    def test_no_image_twice_per_annotator(self, campaign):
        camp, _, _ = campaign
        for annotator, batches in camp.assignment.items():
            seen = set()
            for batch in batches:
                for image_id in batch.image_ids:
                    assert image_id not in seen, (annotator, image_id)
                    seen.add(image_id)

    def test_unique_batches_not_reused(self, campaign):
        camp, _, _ = campaign
        unique_sets = []
        for annotator, batches in camp.assignment.items():
            for batch in batches[2:] if annotator in ("a1", "a2") else batches:
                unique_sets.append(frozenset(batch.image_ids))
        assert len(unique_sets) == len(set(unique_sets))

    def test_roles_draw_from_their_split(self, campaign):
        camp, dataset, _ = campaign
        for batch in camp.assignment["t1"]:
            for image_id in batch.image_ids:
                assert dataset.split[image_id] == "test"
        for batch in camp.assignment["a1"]:
            for image_id in batch.image_ids:
                assert dataset.split[image_id] == "train"

    def test_batches_are_same_class(self, campaign):
        camp, dataset, _ = campaign
        for batches in camp.assignment.values():
            for batch in batches:
                classes = {dataset.records[i].class_id for i in batch.image_ids}
                assert classes == {batch.class_id}

    def test_deterministic_given_seed(self, campaign):
        camp, dataset, _ = campaign
        again = build_assignment(dataset, camp.config, seed=0)
        assert {
            a: [tuple(b.image_ids) for b in bs] for a, bs in camp.assignment.items()
        } == {a: [tuple(b.image_ids) for b in bs] for a, bs in again.items()}

    def test_annotator_in_two_groups_rejected(self):
        with pytest.raises(CampaignError, match="groups"):
            CampaignConfig(
                redundancy_groups={"g1": ["a"], "g2": ["a"]},
                roles={"a": "train-campaign"},
            )


class TestCampaignOps:
    def test_next_batch_idempotent_until_submission(self, campaign):
        camp, _, _ = campaign
        first = camp.next_batch("a1")
        again = camp.next_batch("a1")
        assert first.batch_id == again.batch_id
        submit_next(camp, "a1")
        third = camp.next_batch("a1")
        assert third.batch_id != first.batch_id

    def test_exhaustion_returns_done(self, campaign):
        camp, _, _ = campaign
        for _ in range(len(camp.assignment["a1"])):
            submit_next(camp, "a1")
        assert camp.next_batch("a1") is None

    def test_unknown_annotator(self, campaign):
        camp, _, _ = campaign
        with pytest.raises(SubmissionError, match="register"):
            camp.next_batch("ghost")

    def test_valid_submission_appends_B_records(self, campaign):
        camp, _, tmp = campaign
        submit_next(camp, "a1", value=2)
        records = read_ratings_log(tmp / "ratings.log")
        assert len(records) == 5
        assert all(r.rating == 2 and r.annotator_id == "a1" for r in records)

    def test_out_of_scale_rating_rejected_atomically(self, campaign):
        camp, _, tmp = campaign
        batch = camp.next_batch("a1")
        ratings = [(i, 1) for i in batch.image_ids]
        ratings[2] = (ratings[2][0], 3)
        with pytest.raises(SubmissionError, match="outside"):
            camp.submit_ratings("a1", batch.batch_id, ratings)
        assert read_ratings_log(tmp / "ratings.log") == []

    def test_bool_rating_rejected(self, campaign):
        camp, _, _ = campaign
        batch = camp.next_batch("a1")
        ratings = [(i, True) for i in batch.image_ids]
        with pytest.raises(SubmissionError, match="outside"):
            camp.submit_ratings("a1", batch.batch_id, ratings)

    def test_incomplete_batch_rejected(self, campaign):
        camp, _, _ = campaign
        batch = camp.next_batch("a1")
        with pytest.raises(SubmissionError, match="exactly"):
            camp.submit_ratings("a1", batch.batch_id, [(batch.image_ids[0], 1)])

    def test_duplicate_rejected_first_write_wins(self, campaign):
        camp, _, tmp = campaign
        batch = submit_next(camp, "a1", value=0)
        with pytest.raises(SubmissionError, match="already rated"):
            camp.submit_ratings("a1", batch.batch_id, [(i, 2) for i in batch.image_ids])
        records = read_ratings_log(tmp / "ratings.log")
        assert all(r.rating == 0 for r in records)

    def test_unassigned_batch_rejected(self, campaign):
        camp, _, _ = campaign
        foreign = camp.assignment["a2"][-1]
        if foreign.batch_id in {b.batch_id for b in camp.assignment["a1"]}:
            pytest.skip("assignment layout changed")
        with pytest.raises(SubmissionError, match="not assigned"):
            camp.submit_ratings("a1", foreign.batch_id, [(i, 1) for i in foreign.image_ids])

    def test_restart_replays_log(self, campaign):
        camp, _, tmp = campaign
        batch = submit_next(camp, "a1")
        camp2 = Campaign(camp.assignment, tmp / "ratings.log", camp.config)
        with pytest.raises(SubmissionError, match="already rated"):
            camp2.submit_ratings("a1", batch.batch_id, [(i, 1) for i in batch.image_ids])
        assert camp2.next_batch("a1").batch_id != batch.batch_id

    def test_progress_counts(self, campaign):
        camp, _, _ = campaign
        assert camp.progress("a1")["rated_batches"] == 0
        submit_next(camp, "a1")
        p = camp.progress("a1")
        assert p["rated_batches"] == 1
        assert p["rated_images"] == 5
        assert p["total_batches"] == len(camp.assignment["a1"])


class TestExport:
    def test_empty_campaign(self, campaign):
        camp, _, _ = campaign
        text, counts = camp.export_ratings()
        assert text == ""
        assert counts == {0: 0, 1: 0, 2: 0}

    def test_three_batches_fifteen_records(self, campaign):
        camp, _, _ = campaign
        submit_next(camp, "a1", 0)
        submit_next(camp, "a1", 1)
        submit_next(camp, "a2", 2)
        text, counts = camp.export_ratings()
        assert len(text.splitlines()) == 15
        assert counts == {0: 5, 1: 5, 2: 5}

    def test_export_loads_through_datamodel(self, campaign, tmp_path):
        camp, dataset, tmp = campaign
        submit_next(camp, "a1", 2)
        submit_next(camp, "a2", 1)
        text, _ = camp.export_ratings()
        data_dir = tmp / "data"
        (data_dir / "exported_ratings.jsonl").write_text(text)
        manifest = json.loads((data_dir / "manifest.json").read_text())
        manifest["ratings"] = "exported_ratings.jsonl"
        manifest["batches"] = None
        (data_dir / "manifest2.json").write_text(json.dumps(manifest))
        ds = load_dataset(data_dir / "manifest2.json")
        assert len(ds.ratings) == 10


class TestConcurrentSubmissions:
    def test_interleaved_annotators_no_corruption(self, tmp_path):
        manifest = write_dataset(tmp_path / "data", n_classes=4, per_class=30, B=5, seed=2)
        dataset = load_dataset(manifest)
        annotators = [f"w{k}" for k in range(8)]
        config = CampaignConfig(
            B=5,
            classes_per_annotator=3,
            shared_set_size=5,
            shared_classes=1,
            redundancy_groups={"g": annotators[:4]},
            roles={a: "train-campaign" for a in annotators},
        )
        camp = Campaign(build_assignment(dataset, config, 0), tmp_path / "log", config)
        accepted = []
        errors = []

        def worker(annotator):
            while True:
                batch = camp.next_batch(annotator)
                if batch is None:
                    return
                try:
                    camp.submit_ratings(
                        annotator, batch.batch_id, [(i, 1) for i in batch.image_ids]
                    )
                    accepted.append(batch.batch_id)
                except SubmissionError as exc:
                    errors.append(exc)
                    return

        threads = [threading.Thread(target=worker, args=(a,)) for a in annotators]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        records = read_ratings_log(tmp_path / "log")
        assert len(records) == 5 * len(accepted)
        keys = {(r.annotator_id, r.batch_id, r.image_id) for r in records}
        assert len(keys) == len(records)


def _get(url):
    with urllib.request.urlopen(url) as resp:
        return resp.status, json.loads(resp.read().decode())


def _post(url, payload):
    req = urllib.request.Request(
        url,
        data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read().decode())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read().decode())


@pytest.fixture
def server(campaign):
    camp, dataset, tmp = campaign
    srv = make_server(camp, port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield camp, f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


class TestHttpApi:
    def test_batch_then_submit_then_progress(self, server):
        camp, base = server
        status, batch = _get(f"{base}/api/batch?annotator=a1")
        assert status == 200 and not batch["done"]
        assert len(batch["image_ids"]) == 5
        assert len(batch["image_urls"]) == 5
        payload = {
            "annotator": "a1",
            "batch": batch["batch_id"],
            "ratings": [{"image_id": i, "rating": 2} for i in batch["image_ids"]],
        }
        status, reply = _post(f"{base}/api/ratings", payload)
        assert status == 200 and reply["accepted"] and reply["count"] == 5
        status, progress = _get(f"{base}/api/progress?annotator=a1")
        assert progress["rated_batches"] == 1

    def test_duplicate_submission_conflict(self, server):
        camp, base = server
        _, batch = _get(f"{base}/api/batch?annotator=a2")
        payload = {
            "annotator": "a2",
            "batch": batch["batch_id"],
            "ratings": [{"image_id": i, "rating": 1} for i in batch["image_ids"]],
        }
        assert _post(f"{base}/api/ratings", payload)[0] == 200
        status, reply = _post(f"{base}/api/ratings", payload)
        assert status == 409
        assert "already rated" in reply["error"]

    def test_bad_rating_rejected(self, server):
        camp, base = server
        _, batch = _get(f"{base}/api/batch?annotator=a1")
        payload = {
            "annotator": "a1",
            "batch": batch["batch_id"],
            "ratings": [{"image_id": i, "rating": 9} for i in batch["image_ids"]],
        }
        status, reply = _post(f"{base}/api/ratings", payload)
        assert status == 400

    def test_unknown_annotator_404_with_hint(self, server):
        camp, base = server
        try:
            with urllib.request.urlopen(f"{base}/api/batch?annotator=ghost") as resp:
                status, body = resp.status, json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            status, body = exc.code, json.loads(exc.read().decode())
        assert status == 404
        assert "register" in body["error"]

    def test_export_round_trip(self, server):
        camp, base = server
        _, batch = _get(f"{base}/api/batch?annotator=a1")
        payload = {
            "annotator": "a1",
            "batch": batch["batch_id"],
            "ratings": [{"image_id": i, "rating": 0} for i in batch["image_ids"]],
        }
        _post(f"{base}/api/ratings", payload)
        with urllib.request.urlopen(f"{base}/api/export") as resp:
            lines = resp.read().decode().splitlines()
        assert len(lines) == 5
        for line in lines:
            record = json.loads(line)
            assert record["rating"] in (0, 1, 2)
