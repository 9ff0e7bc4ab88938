# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

"""policykg test suite"""
