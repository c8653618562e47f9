"""comal-lab: synthetic-scene domain adaptation with flow and masked-structure priors"""
