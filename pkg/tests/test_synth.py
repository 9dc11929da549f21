import json

import numpy as np
import pytest

from margincal.calibration import class_stats
from margincal.core import load_manifest, load_mask, load_scores
from margincal.synth import InfeasibleSpecError, SynthSpec, generate, split, write_dataset


def test_deterministic():
    spec = SynthSpec(seed=7, images=12, height=16, width=16, noise_sigma=0.3)
    a, b = generate(spec), generate(spec)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()
    assert generate(SynthSpec(seed=8, images=12, height=16, width=16)).masks.tobytes() != a.masks.tobytes()


def test_prefix_stable_across_image_counts():
    small = generate(SynthSpec(seed=3, images=5, noise_sigma=0.2))
    big = generate(SynthSpec(seed=3, images=9, noise_sigma=0.2))
    np.testing.assert_array_equal(small.features, big.features[:5])


def test_realized_frequencies_match_targets():
    data = generate(SynthSpec(seed=0, images=100))
    freqs = class_stats(data.label_masks()).frequencies
    np.testing.assert_allclose(freqs, [0.89, 0.10, 0.01], rtol=0.2)


def test_noiseless_features_are_prototypes():
    data = generate(SynthSpec(seed=1, images=4, noise_sigma=0.0, feature_channels=5))
    np.testing.assert_array_equal(data.features, np.eye(3, 5)[data.masks])


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(target_frequencies=(0.5, 0.6, -0.1))
    with pytest.raises(ValueError):
        SynthSpec(classes=3, feature_channels=2)
    with pytest.raises(InfeasibleSpecError):
        generate(SynthSpec(images=2, classes=2, target_frequencies=(0.01, 0.99)))


def test_spec_json_round_trip(tmp_path):
    spec = SynthSpec(seed=4, images=9, noise_sigma=0.25)
    (tmp_path / "s.json").write_text(spec.to_json())
    assert SynthSpec.from_json(tmp_path / "s.json") == spec
    assert json.loads(spec.to_json())["target_frequencies"] == [0.89, 0.10, 0.01]


def test_split_is_consecutive():
    data = generate(SynthSpec(seed=0, images=10, height=8, width=8, target_frequencies=(0.7, 0.2, 0.1)))
    tr, va, te = split(data, 5, 3, 2)
    assert (len(tr), len(va), len(te)) == (5, 3, 2)
    np.testing.assert_array_equal(va.masks, data.masks[5:8])
    with pytest.raises(ValueError):
        split(data, 8, 2, 1)


def test_write_dataset(tmp_path):
    data = generate(SynthSpec(seed=2, images=3, height=8, width=8, target_frequencies=(0.7, 0.2, 0.1)))
    manifest = write_dataset(data, tmp_path)
    man = load_manifest(manifest)
    assert len(man) == 3 and man.classes == 3
    feat_path, mask_path = man.entries[1]
    np.testing.assert_array_equal(load_mask(mask_path).data, data.masks[1])
    np.testing.assert_allclose(load_scores(feat_path).data, data.features[1], rtol=1e-6, atol=1e-6)
