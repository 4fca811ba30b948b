"""Shared fixtures: the synthetic image dataset and the imbalance fixture.

The imbalance fixture rebuilds the published rebalancing bookkeeping as an
explicit run partition: per-class run lengths are chosen so that the per-run
ceil(n/k) rule lands exactly on the published post-rebalancing counts.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from llanet import demo
from llanet.data import DatasetManifest, SampleRecord
from llanet.training import LoadedDataset, Normalization
from llanet.data import read_manifest

# class indices, named so the fixture arithmetic below stays readable
ANGER, DISGUST, FEAR, HAPPY, SAD, SURPRISE, NEUTRAL = range(7)

# per-class (label, list of run lengths) for the training split; single-run
# classes keep every frame (no k entry), multi-run classes are partitioned so
# the thinned totals match the published table exactly:
#   neutral 546039 = 545412 + 621*1 + 6  -> 45451 + 621 + 1 = 46073 kept at k=12
#   happy   171902 = 171476 + 426*1      -> 85738 + 426     = 86164 kept at k=2
IMBALANCE_RUNS = {
    ANGER: [25634],
    DISGUST: [11490],
    FEAR: [19279],
    HAPPY: [171476] + [1] * 426,
    SAD: [102934],
    SURPRISE: [43306],
    NEUTRAL: [545412] + [1] * 621 + [6],
}
IMBALANCE_K = {NEUTRAL: 12, HAPPY: 2}
IMBALANCE_QUOTAS = {ANGER: 24242, DISGUST: 5062, FEAR: 6192}
EXPECTED_AFTER = {ANGER: 49876, DISGUST: 16552, FEAR: 25471, HAPPY: 86164,
                  SAD: 102934, SURPRISE: 43306, NEUTRAL: 46073}
EXPECTED_TOTAL_AFTER = 370376


def records_for_runs(label: int, run_lengths, tag: str):
    recs = []
    for ri, length in enumerate(run_lengths):
        seq = f"{tag}{label}r{ri}"
        recs.extend(
            SampleRecord(sequence_id=seq, frame_index=f, image_path="", label=label)
            for f in range(length))
    return recs


def build_imbalance_manifests():
    """(base, supplement) manifests realizing the published run partition."""
    base_records = []
    for label, runs in IMBALANCE_RUNS.items():
        base_records.extend(records_for_runs(label, runs, "b"))
    supp_records = []
    for label, quota in IMBALANCE_QUOTAS.items():
        supp_records.extend(
            SampleRecord(sequence_id=f"x{label}", frame_index=f, image_path="",
                         label=label, source="external_a")
            for f in range(quota))
    return DatasetManifest(base_records), DatasetManifest(supp_records)


@pytest.fixture(scope="session")
def demo_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    demo.write_demo_dataset(root, images_per_class=10, size=32, seed=7)
    return root


@pytest.fixture(scope="session")
def demo_dataset(demo_root):
    manifest = read_manifest(demo_root / "train.csv")
    return LoadedDataset.from_manifest(manifest, demo_root)


@pytest.fixture(scope="session")
def plain_norm():
    return Normalization(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
