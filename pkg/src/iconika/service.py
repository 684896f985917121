"""Annotation campaign service: batch assignment plus an append-only log.

A campaign is computed up front from a seed: every annotator gets a fixed,
ordered list of same-class batches (their redundancy group's shared batches
first, then unique ones). Ratings are appended to a JSONL log, one record
per image, flushed and fsynced before the submission is acknowledged;
nothing ever rewrites the log. The HTTP layer is a thin JSON front end over
the same operations plus static file serving for images and the rating UI.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .datamodel import (
    AnnotationBatch,
    Dataset,
    DatasetError,
    RatingRecord,
    VALID_RATINGS,
    rating_to_line,
)

logger = logging.getLogger(__name__)


class CampaignError(Exception):
    """Invalid campaign configuration or assignment inputs."""


class SubmissionError(Exception):
    """A rating submission the service must reject (no partial writes)."""

    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


@dataclass
class CampaignConfig:
    """Static parameters of one annotation campaign."""

    B: int = 5
    classes_per_annotator: int = 50
    shared_set_size: int = 50  # images each redundancy group has in common
    shared_classes: int = 10
    redundancy_groups: dict[str, list[str]] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)  # annotator -> train-campaign | test-campaign

    def __post_init__(self):
        if self.B < 2:
            raise CampaignError(f"B must be >= 2, got {self.B}")
        seen: dict[str, str] = {}
        for group, members in self.redundancy_groups.items():
            for annotator in members:
                if annotator in seen:
                    raise CampaignError(
                        f"annotator {annotator!r} is in groups {seen[annotator]!r} and {group!r}"
                    )
                seen[annotator] = group
        # roles is a mapping, so one annotator cannot serve both campaigns
        for annotator, role in self.roles.items():
            if role not in ("train-campaign", "test-campaign"):
                raise CampaignError(f"unknown role {role!r} for {annotator!r}")

    @classmethod
    def from_file(cls, path) -> "CampaignConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CampaignError(f"missing file: {path}") from None
        except json.JSONDecodeError as exc:
            raise CampaignError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls(
            B=int(obj.get("B", 5)),
            classes_per_annotator=int(obj.get("classes_per_annotator", 50)),
            shared_set_size=int(obj.get("shared_set_size", 50)),
            shared_classes=int(obj.get("shared_classes", 10)),
            redundancy_groups={k: list(v) for k, v in (obj.get("redundancy_groups") or {}).items()},
            roles=dict(obj.get("roles") or {}),
        )


def _role_split(role: str) -> str:
    return "train" if role == "train-campaign" else "test"


def build_assignment(
    dataset: Dataset, config: CampaignConfig, seed: int
) -> dict[str, list[AnnotationBatch]]:
    """Compute the static batch assignment for every annotator.

    Shared batches (identical within a redundancy group) come first, then
    unique batches drawn round-robin so no image is assigned twice to the
    same annotator and unique batches are never reused across annotators.
    """
    if not config.roles:
        raise CampaignError("campaign has no annotators")
    rng = np.random.default_rng(seed)
    assignment: dict[str, list[AnnotationBatch]] = {a: [] for a in sorted(config.roles)}
    batch_counter = 0

    def make_batches(split_name: str) -> dict[int, list[list[str]]]:
        """Chunk each class's images (seeded order) into full batches of B."""
        by_class: dict[int, list[str]] = {}
        for image_id in dataset.ids_in_split(split_name):
            by_class.setdefault(dataset.records[image_id].class_id, []).append(image_id)
        chunks: dict[int, list[list[str]]] = {}
        for class_id in sorted(by_class):
            ids = sorted(by_class[class_id])
            perm = rng.permutation(len(ids))
            shuffled = [ids[i] for i in perm]
            full = [
                shuffled[k : k + config.B]
                for k in range(0, len(shuffled) - config.B + 1, config.B)
            ]
            if full:
                chunks[class_id] = full
        return chunks

    for role in ("train-campaign", "test-campaign"):
        annotators = sorted(a for a, r in config.roles.items() if r == role)
        if not annotators:
            continue
        pools = make_batches(_role_split(role))
        if not pools:
            raise CampaignError(f"no {_role_split(role)} images to batch for {role}")

        # shared batches per redundancy group, consumed from the pools
        shared: dict[str, list[AnnotationBatch]] = {}
        n_shared = config.shared_set_size // config.B
        for group in sorted(config.redundancy_groups):
            members = [a for a in config.redundancy_groups[group] if a in annotators]
            if not members:
                continue
            class_ids = sorted(pools)
            take = class_ids[: config.shared_classes] or class_ids
            picked: list[AnnotationBatch] = []
            k = 0
            while len(picked) < n_shared and take:
                class_id = take[k % len(take)]
                if pools.get(class_id):
                    images = pools[class_id].pop(0)
                    batch_counter += 1
                    picked.append(
                        AnnotationBatch(
                            batch_id=f"b{batch_counter:06d}",
                            class_id=class_id,
                            image_ids=tuple(images),
                            assigned_annotator=group,
                        )
                    )
                    if not pools[class_id]:
                        del pools[class_id]
                        take = [c for c in take if c != class_id]
                        if not take:
                            break
                        k -= 1
                k += 1
            shared[group] = picked

        group_of = {
            a: g for g, members in config.redundancy_groups.items() for a in members
        }
        for annotator in annotators:
            for batch in shared.get(group_of.get(annotator, ""), []):
                assignment[annotator].append(
                    AnnotationBatch(
                        batch_id=f"{batch.batch_id}@{annotator}",
                        class_id=batch.class_id,
                        image_ids=batch.image_ids,
                        assigned_annotator=annotator,
                    )
                )

        # unique batches, round-robin until everyone is full or pools run dry
        remaining = [
            (class_id, images) for class_id in sorted(pools) for images in pools[class_id]
        ]
        order = rng.permutation(len(remaining))
        queue = [remaining[i] for i in order]
        progress = True
        while progress and queue:
            progress = False
            for annotator in annotators:
                if not queue:
                    break
                if len(assignment[annotator]) >= config.classes_per_annotator:
                    continue
                class_id, images = queue.pop(0)
                batch_counter += 1
                assignment[annotator].append(
                    AnnotationBatch(
                        batch_id=f"b{batch_counter:06d}@{annotator}",
                        class_id=class_id,
                        image_ids=tuple(images),
                        assigned_annotator=annotator,
                    )
                )
                progress = True
    return assignment


class Campaign:
    """Runtime state: immutable assignment plus the append-only ratings log.

    ``next_batch`` is lock-free over the immutable assignment; submissions
    serialize on a single writer lock and are acknowledged only after the
    appended lines are flushed and fsynced. Restart replays the log to
    rebuild the submitted set; duplicates stay rejected across restarts.
    """

    def __init__(
        self,
        assignment: dict[str, list[AnnotationBatch]],
        log_path,
        config: CampaignConfig,
    ):
        self.config = config
        self.assignment = assignment
        self.batches: dict[str, AnnotationBatch] = {}
        for batches in assignment.values():
            for batch in batches:
                self.batches[batch.batch_id] = batch
        self.log_path = Path(log_path)
        self._write_lock = threading.Lock()
        self._submitted: set[tuple[str, str]] = set()
        if self.log_path.exists():
            for rec in read_ratings_log(self.log_path):
                self._submitted.add((rec.annotator_id, rec.batch_id))
        else:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.touch()

    def is_known(self, annotator_id: str) -> bool:
        return annotator_id in self.assignment

    def next_batch(self, annotator_id: str) -> AnnotationBatch | None:
        """The annotator's next unrated batch, or None when done.

        Idempotent: repeated calls return the same batch until its ratings
        arrive.
        """
        if annotator_id not in self.assignment:
            raise SubmissionError(
                f"unknown annotator {annotator_id!r}; register it in the campaign config",
                status=404,
            )
        submitted = self._submitted
        for batch in self.assignment[annotator_id]:
            if (annotator_id, batch.batch_id) not in submitted:
                return batch
        return None

    def submit_ratings(
        self, annotator_id: str, batch_id: str, ratings: list[tuple[str, int]]
    ) -> int:
        """Validate and durably append one batch's ratings; first write wins.

        Returns the number of records appended. Any rejection leaves the log
        untouched.
        """
        if annotator_id not in self.assignment:
            raise SubmissionError(f"unknown annotator {annotator_id!r}", status=404)
        batch = self.batches.get(batch_id)
        if batch is None or batch.assigned_annotator != annotator_id:
            raise SubmissionError(
                f"batch {batch_id!r} is not assigned to {annotator_id!r}", status=404
            )
        for image_id, rating in ratings:
            if isinstance(rating, bool) or not isinstance(rating, int) or rating not in VALID_RATINGS:
                raise SubmissionError(f"rating {rating!r} outside {{0, 1, 2}}")
        given = [image_id for image_id, _ in ratings]
        if sorted(given) != sorted(batch.image_ids) or len(given) != self.config.B:
            raise SubmissionError(
                f"submission must rate exactly the {self.config.B} images of the batch"
            )
        now = time.time()
        records = [
            RatingRecord(annotator_id, batch_id, image_id, rating, now)
            for image_id, rating in ratings
        ]
        with self._write_lock:
            if (annotator_id, batch_id) in self._submitted:
                raise SubmissionError(
                    f"batch {batch_id!r} already rated by {annotator_id!r}", status=409
                )
            with open(self.log_path, "a", encoding="utf-8") as fh:
                for rec in records:
                    fh.write(rating_to_line(rec) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._submitted.add((annotator_id, batch_id))
        return len(records)

    def progress(self, annotator_id: str) -> dict:
        if annotator_id not in self.assignment:
            raise SubmissionError(f"unknown annotator {annotator_id!r}", status=404)
        total = len(self.assignment[annotator_id])
        rated = sum(
            1
            for batch in self.assignment[annotator_id]
            if (annotator_id, batch.batch_id) in self._submitted
        )
        return {
            "annotator": annotator_id,
            "rated_batches": rated,
            "total_batches": total,
            "rated_images": rated * self.config.B,
        }

    def export_ratings(self) -> tuple[str, dict[int, int]]:
        """The raw log text plus a per-rating-value count summary."""
        text = self.log_path.read_text(encoding="utf-8")
        counts = {0: 0, 1: 0, 2: 0}
        for rec in read_ratings_log(self.log_path):
            counts[rec.rating] += 1
        return text, counts

    def save_assignment(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for annotator in sorted(self.assignment):
                for batch in self.assignment[annotator]:
                    fh.write(
                        json.dumps(
                            {
                                "batch_id": batch.batch_id,
                                "class_id": batch.class_id,
                                "image_ids": list(batch.image_ids),
                                "assigned_annotator": batch.assigned_annotator,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )


def read_ratings_log(path) -> list[RatingRecord]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(
                RatingRecord(
                    annotator_id=str(obj["annotator_id"]),
                    batch_id=str(obj["batch_id"]),
                    image_id=str(obj["image_id"]),
                    rating=int(obj["rating"]),
                    timestamp=float(obj["timestamp"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad rating record ({exc})") from None
    return records


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True) + "\n").encode("utf-8")


class _Handler(BaseHTTPRequestHandler):
    """JSON API over a Campaign, plus static images and the UI bundle."""

    campaign: Campaign
    image_dir: Path | None = None
    ui_dir: Path | None = None
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("http: " + fmt, *args)

    def _send(self, status: int, payload: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _send_json(self, status: int, obj) -> None:
        self._send(status, _json_bytes(obj))

    def _send_error_json(self, exc: SubmissionError) -> None:
        self._send_json(exc.status, {"error": str(exc)})

    def do_GET(self):  # noqa: N802 (http.server API)
        url = urlparse(self.path)
        query = parse_qs(url.query)
        try:
            if url.path == "/api/batch":
                annotator = query.get("annotator", [""])[0]
                batch = self.campaign.next_batch(annotator)
                if batch is None:
                    self._send_json(200, {"done": True})
                else:
                    self._send_json(
                        200,
                        {
                            "done": False,
                            "batch_id": batch.batch_id,
                            "class_id": batch.class_id,
                            "image_ids": list(batch.image_ids),
                            "image_urls": [f"/static/{i}" for i in batch.image_ids],
                        },
                    )
            elif url.path == "/api/progress":
                annotator = query.get("annotator", [""])[0]
                self._send_json(200, self.campaign.progress(annotator))
            elif url.path == "/api/export":
                text, counts = self.campaign.export_ratings()
                payload = text.encode("utf-8")
                self._send(200, payload, content_type="application/x-ndjson")
            elif url.path.startswith("/static/"):
                self._serve_file(self.image_dir, url.path[len("/static/") :])
            else:
                name = url.path.lstrip("/") or "index.html"
                self._serve_file(self.ui_dir, name)
        except SubmissionError as exc:
            self._send_error_json(exc)
        except Exception:
            logger.exception("internal error handling %s", self.path)
            self._send_json(500, {"error": "internal error"})

    def _serve_file(self, root: Path | None, name: str) -> None:
        if root is None:
            self._send_json(404, {"error": "no static directory configured"})
            return
        target = (root / name).resolve()
        if not str(target).startswith(str(root.resolve())) or not target.is_file():
            self._send_json(404, {"error": f"not found: {name}"})
            return
        ctype = {
            ".html": "text/html; charset=utf-8",
            ".js": "text/javascript; charset=utf-8",
            ".css": "text/css; charset=utf-8",
            ".png": "image/png",
            ".jpg": "image/jpeg",
            ".jpeg": "image/jpeg",
            ".json": "application/json",
        }.get(target.suffix.lower(), "application/octet-stream")
        self._send(200, target.read_bytes(), content_type=ctype)

    def do_POST(self):  # noqa: N802
        url = urlparse(self.path)
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length)
            if url.path != "/api/ratings":
                self._send_json(404, {"error": f"unknown endpoint {url.path}"})
                return
            try:
                obj = json.loads(body.decode("utf-8"))
                annotator = str(obj["annotator"])
                batch_id = str(obj["batch"])
                ratings = [(str(r["image_id"]), r["rating"]) for r in obj["ratings"]]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise SubmissionError(f"malformed submission body ({exc})") from None
            count = self.campaign.submit_ratings(annotator, batch_id, ratings)
            self._send_json(200, {"accepted": True, "count": count})
        except SubmissionError as exc:
            self._send_error_json(exc)
        except Exception:
            logger.exception("internal error handling %s", self.path)
            self._send_json(500, {"error": "internal error"})


def make_server(
    campaign: Campaign,
    host: str = "127.0.0.1",
    port: int = 0,
    image_dir=None,
    ui_dir=None,
) -> ThreadingHTTPServer:
    """Build (but do not start) the HTTP server; port 0 picks a free port."""
    handler = type(
        "CampaignHandler",
        (_Handler,),
        {
            "campaign": campaign,
            "image_dir": None if image_dir is None else Path(image_dir),
            "ui_dir": None if ui_dir is None else Path(ui_dir),
        },
    )
    return ThreadingHTTPServer((host, port), handler)
