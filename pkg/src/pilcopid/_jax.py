"""JAX import with double precision switched on before any array is created."""
import jax

jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platforms", "cpu")

import jax.numpy as jnp  # noqa: E402

__all__ = ["jax", "jnp"]
