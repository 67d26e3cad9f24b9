"""Meta transfer of self-supervised graph features for scarce targets.

Library layout:

- tensor / optim: float64 autodiff engine and the two optimizers
- data:           datasets, correlation graphs, synthetic generation
- model:          ST-GCN extractor, heads, voting, serialization
- losses:         contrastive, cross-entropy, combined objectives
- training:       bi-level trainer and comparison strategies
- domainsim:      feature histograms, exact EMD, domain similarity
- probe:          zero-shot features, PCA, SVM/MLP probes, CV metrics
- evaluation:     cross-validated strategy comparison
- config / cli:   run configuration and the command-line surface
"""

__version__ = "0.1.0"
