"""BOA: build and output analysis framework.

Keeps a persistent model of a software domain (platforms, projects,
versions, installations), drives installs and builds through a long-lived
shell session, classifies build output, and validates program output
against stored references.
"""

__version__ = "0.1.0"
