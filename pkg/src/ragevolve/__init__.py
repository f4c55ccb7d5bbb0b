"""Training-free evolution of a multi-agent retrieval-augmented QA system.

The engine samples query-specific agent execution plans, runs them as groups,
extracts group-relative natural-language insights into a persistent experience
library, evolves per-agent prompts from failure analysis, mutates plan
topologies on persistent failure, and reports topology/token dynamics.
"""

__version__ = "0.1.0"
