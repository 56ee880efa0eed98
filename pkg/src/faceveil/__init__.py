"""faceveil: desk-scale facial-privacy pipeline built on a small autodiff core.

Fine-tunes a toy denoising score network toward two goals at once — matching
a target identity under an ensemble of surrogate face encoders, and shifting
the rendered expression — while layer-wise gradient projection keeps the two
objectives from cancelling each other out.  Landmark-Laplacian smoothing and
perceptual penalties keep the edits local; a held-out encoder plays the
black-box recognizer for transferability scoring.
"""

__version__ = "0.1.0"
