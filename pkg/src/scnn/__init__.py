"""Self-competitive training: a classifier synthesizes samples that sit on its
own decision boundary via differentiable image manipulators, then retrains on
them in a train / synthesize / retrain cycle.
"""

__version__ = "0.1.0"
