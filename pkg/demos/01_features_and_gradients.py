"""
From a breathing cycle to a checked gradient
=============================================

A synthetic wheeze is turned into normalised log-mel frames, then every
training loss is checked against central finite differences.
"""

import numpy as np

from sgscl import audio, corpus, objectives, tensor

# one wheeze cycle as heard through device 1
spec = corpus.SynthSpec.biased()
clip = corpus.synth_clip(corpus.LungLabel.WHEEZE, 1, spec, np.random.default_rng(0))
print(f"clip: {clip.duration:.2f} s at {clip.sample_rate} Hz")

# resample, repeat to 8 s, 128 mel bins every 10 ms, normalise
feats = audio.featurize(clip)
print("features:", feats.shape, "mean %.2f std %.2f" % (feats.mean(), feats.std()))

# the wheeze tone sits near 400 Hz, so the loudest mel bin should be close to it
edges = audio.mel_to_hz(np.linspace(audio.hz_to_mel(20), audio.hz_to_mel(8000), audio.N_MELS + 2))
loudest = feats.mean(axis=0).argmax()
print(f"loudest bin centred at {edges[loudest + 1]:.0f} Hz")

###############################################################################
# Gradient reversal is the identity going forward and flips the sign going
# back. Stop-gradient lets the value through and nothing else.

x = tensor.Tensor(np.array([5.0, -2.0]), requires_grad=True)
y = tensor.gradient_reversal(x, 0.5)
tensor.backward(tensor.sum(y))
print("reversal forward", y.data, "backward", x.grad)

###############################################################################
# The contrastive loss for a small multi-view batch. Rows 2k and 2k+1 are
# two views of one recording, so each row has at least one same-device positive.

rng = np.random.default_rng(1)
z = rng.standard_normal((8, 16))
devices = np.array([0, 0, 1, 1, 0, 0, 1, 1])
for form in (objectives.LOG_OF_MEAN, objectives.MEAN_OF_LOG):
    value = objectives.contrastive_loss(z, z, devices, tau=0.06, form=form).item()
    print(f"{form:12s} loss {value:.4f}")

###############################################################################
# Every loss, every variant, against finite differences

from sgscl.gradcheck import run_gradcheck  # noqa: E402

for name, err in run_gradcheck(n_batches=3).items():
    print(f"{name:18s} {err:.1e}")
