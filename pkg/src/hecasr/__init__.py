"""Two-pass speech recognition sandbox.

A simulated hybrid recognizer (frame acoustic scorer, n-gram language
model, energy segmenter) produces segments and N-best hypotheses that
feed an attention encoder-decoder second pass with dual cross-attention,
trained with a joint CTC + attention objective and decoded with a
one-pass joint beam search.
"""

__version__ = "0.1.0"
