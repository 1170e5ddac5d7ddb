"""Leave-latest-out train/test partition and in-train validation sampling."""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import SplitError
from .ingest import RatingsDataset, read_canonical, write_canonical

LEAVE_LATEST_OUT = "leave-latest-out/v1"


@dataclass(frozen=True)
class SplitResult:
    train: RatingsDataset
    test: RatingsDataset
    protocol_tag: str = LEAVE_LATEST_OUT


def leave_latest_out(ds):
    """Hold out each user's most recent interaction.

    Ties on the maximum timestamp go to the interaction that appears last in
    the file. Raises :class:`SplitError` for a user with a single interaction.
    """
    counts = ds.user_counts()
    lonely = np.flatnonzero(counts == 1)
    if len(lonely):
        u = int(lonely[0])
        raise SplitError(
            f"user {int(ds.user_ids[u])} (dense {u}) has a single interaction; "
            "holding it out would leave the user with no training data"
        )

    # Sort by (user, timestamp, file position); the last row of each user
    # block is the held-out interaction.
    order = np.lexsort((ds.positions, ds.timestamps, ds.users))
    sorted_users = ds.users[order]
    last_of_block = np.ones(len(order), dtype=bool)
    last_of_block[:-1] = sorted_users[1:] != sorted_users[:-1]
    test_rows = np.sort(order[last_of_block])

    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[test_rows] = True
    return SplitResult(train=ds.subset(~test_mask), test=ds.subset(test_mask))


def sample_validation(train, size, seed):
    """Uniformly sample ``size`` train interactions without replacement.

    The sampled entries stay in ``train``; the returned view is for measuring
    in-train error only.
    """
    if size > len(train):
        raise SplitError(f"validation size {size} exceeds train size {len(train)}")
    if size < 0:
        raise SplitError("validation size must be non-negative")
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(train), size=size, replace=False)
    return train.subset(rows)


def write_split(split, directory, source_ds, seed=None, config=None):
    """Write ``train.csv``, ``test.csv``, ``index.json`` and ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "train.csv"), "w", encoding="utf-8", newline="") as fh:
        write_canonical(split.train, fh)
    with open(os.path.join(directory, "test.csv"), "w", encoding="utf-8", newline="") as fh:
        write_canonical(split.test, fh)
    with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"user_ids": source_ds.user_ids.tolist(), "item_ids": source_ds.item_ids.tolist()},
            fh,
        )
    manifest = {
        "protocol_tag": split.protocol_tag,
        "seed": seed,
        "train_size": len(split.train),
        "test_size": len(split.test),
        "m": source_ds.m,
        "n": source_ds.n,
    }
    if config is not None:
        manifest["config"] = config
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_split(directory):
    with open(os.path.join(directory, "index.json"), encoding="utf-8") as fh:
        index = json.load(fh)
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    empty = np.zeros(0, dtype=np.int64)
    skeleton = RatingsDataset(
        users=empty,
        items=empty.copy(),
        ratings=np.zeros(0),
        timestamps=empty.copy(),
        user_ids=np.array(index["user_ids"], dtype=np.int64),
        item_ids=np.array(index["item_ids"], dtype=np.int64),
    )
    with open(os.path.join(directory, "train.csv"), encoding="utf-8", newline="") as fh:
        train = read_canonical(fh, index_from=skeleton)
    with open(os.path.join(directory, "test.csv"), encoding="utf-8", newline="") as fh:
        test = read_canonical(fh, index_from=skeleton)
    return SplitResult(train=train, test=test, protocol_tag=manifest["protocol_tag"]), manifest
