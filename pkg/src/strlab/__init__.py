"""strlab: a desk-scale scene-text-recognition laboratory.

CRNN and STAR-Net recognizers over a from-scratch autodiff tensor engine,
CTC alignment and decoding, a correction-BiLSTM plug-in, toy synthetic
script generation, ADADELTA training, cross-script transfer learning, and
CRR/WRR evaluation.
"""

__version__ = "0.1.0"
