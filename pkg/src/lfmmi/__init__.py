"""Lattice-free MMI ("chain") training for feed-forward acoustic models.

Modules: ``graph`` (acceptors and phone-LM graphs), ``chainloss`` (the
objective and its gradient), ``nnet`` (TDNN / TDNN-F networks), ``ngsgd``
(optimizers and LR schedule), ``egsio`` (ark/scp archives and training
examples), ``trainer`` (parallel training with model averaging), ``decode``
(Viterbi decoding and WER) and ``cli``.
"""
__version__ = "0.1.0"
