import numpy as np
import pytest
from sklearn.base import clone

from specden.dsp import log_power, stft
from specden.datagen import mix, normalize_utterance
from specden.estimators import SpectralDenoiser, check_pairs, check_spectrogram_list
from specden.toy import noise_like, speech_like


def pair(seed):
    m = mix(normalize_utterance(speech_like(1.0, seed=seed)), noise_like(1.0, seed=seed + 100), 5.0)
    return log_power(stft(m.noisy)).values, log_power(stft(m.clean)).values


def small(**kw):
    params = dict(model="unet", depth=2, base_channels=2, chunk_frames=32, chunk_bins=32, batch_size=4,
                  warmup_batches=1, learning_rate=5e-3, max_steps=15, random_state=0)
    params.update(kw)
    return SpectralDenoiser(**params)


def test_params_round_trip_and_clone():
    est = small()
    assert est.get_params()["model"] == "unet"
    c = clone(est).set_params(depth=3)
    assert c.depth == 3 and est.depth == 2


def test_validation_helpers():
    a = np.zeros((10, 40))
    assert len(check_spectrogram_list(a)) == 1
    assert len(check_spectrogram_list(np.zeros((3, 10, 40)))) == 3
    with pytest.raises(ValueError, match="empty"):
        check_spectrogram_list([])
    with pytest.raises(ValueError, match="bins"):
        check_spectrogram_list(a, n_bins=64)
    with pytest.raises(ValueError):
        check_spectrogram_list([np.full((4, 4), np.nan)])
    with pytest.raises(ValueError, match="differs"):
        check_pairs([a], [np.zeros((11, 40))])
    with pytest.raises(ValueError, match="has 1 spectrograms"):
        check_pairs([a], [a, a])


def test_fit_predict_score(tmp_path):
    xs, ys = zip(*(pair(s) for s in range(2)))
    est = small().fit(list(xs), list(ys))
    assert len(est.history_) == 15 and est.n_params_ > 0
    out = est.predict(xs[0])
    assert out.shape == xs[0].shape
    # bins beyond the chunk width come back untouched from the input
    np.testing.assert_array_equal(out[:, 32:], xs[0][:, 32:])
    assert np.isfinite(est.score(list(xs), list(ys)))
    est.save(tmp_path / "m.spck")
    back = SpectralDenoiser.from_checkpoint(tmp_path / "m.spck")
    assert back.get_params()["depth"] == 2 and back.max_steps == 15
    np.testing.assert_array_equal(back.predict(xs[0]), out)


def test_unfitted_and_bad_model():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        small().predict(np.zeros((10, 40)))
    with pytest.raises(ValueError, match="model must be"):
        small(model="resnet").fit([np.zeros((10, 40))], [np.zeros((10, 40))])
