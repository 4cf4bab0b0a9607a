"""Variational auto-encoders with mixture-of-posteriors priors.

Library layout:

- `autodiff`      reverse-mode AD over dense float64 tensors
- `distributions` diagonal Gaussians, Bernoulli and discretized-logistic
                  likelihoods, reparameterized sampling
- `priors`        interchangeable latent priors (standard Gaussian, mixture
                  of Gaussians, mixture-of-posteriors variants)
- `models`        gated-MLP VAE and two-level hierarchical VAE, checkpoints
- `training`      warm-up objective, block-normalized Adam, fitting loop
- `evaluation`    importance-sampled log-likelihood and diagnostics
- `datasets`      IDX / raw-matrix loaders, splits, synthetic data
- `cli`           command-line entry point
"""

__version__ = "0.1.0"
