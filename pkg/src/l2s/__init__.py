"""Layout-togglable storytelling on synthetic blob stories.

Importing the package stays cheap on purpose: the command-line entry point
sets BLAS thread limits before numpy is loaded.
"""

__version__ = "0.1.0"
