# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

"""Policy knowledge graphs with adaptive graph retrieval"""

__version__ = "0.1.0"
