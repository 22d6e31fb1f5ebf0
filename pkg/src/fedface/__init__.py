"""Federated face recognition under data heterogeneity: FedAvg and
Hessian-free MAML clients, embedding regularization, skewed partitions,
and TAR@FAR evaluation on a numpy MLP backbone."""

__version__ = "0.1.0"
