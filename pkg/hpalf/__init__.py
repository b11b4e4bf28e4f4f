"""Desk-scale laboratory for hierarchical-perception adversarial CS-MRI reconstruction."""
