"""Differentiable computation substrate: autograd, layers, optimizer, kernels."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
