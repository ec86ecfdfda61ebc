"""The data oracle: a clamped bar pushed at one surface node.

Builds the desk bar, solves one tool interaction with the linear FEM, checks
that doubling the push doubles the answer, and writes the result to VTK.
"""
import numpy as np

from surgformer.elasticity import BoundarySpec, MaterialParams, assemble_stiffness, solve_dirichlet
from surgformer.formats import write_vtk
from surgformer.mesh import extract_surface, generate_bar_mesh

mesh = generate_bar_mesh(14, 4, 4, (0.14, 0.04, 0.04))
print(f"desk bar: {mesh.n_nodes} nodes, {mesh.n_tets} tets, {mesh.fixed_nodes.size} clamped at x = 0")

K = assemble_stiffness(mesh, MaterialParams())
surface = extract_surface(mesh)
tip = int(np.argmax(mesh.vertices[:, 0] + mesh.vertices[:, 2]))
push = np.array([0.0, 0.0, -0.005])
U = solve_dirichlet(K, BoundarySpec.tool(mesh.fixed_nodes, tip, push))
print(f"tool node {tip} at {mesh.vertices[tip].round(3)}, push {push}")
print(f"max |u| = {np.linalg.norm(U, axis=1).max():.4e} m, clamp max |u| = {np.abs(U[mesh.fixed_nodes]).max():.1e}")

U2 = solve_dirichlet(K, BoundarySpec.tool(mesh.fixed_nodes, tip, 2 * push))
print(f"linearity: max |u(2p) - 2 u(p)| = {np.abs(U2 - 2 * U).max():.1e}")
print(f"surface: {surface.triangles.shape[0]} triangles")

write_vtk("demo_fem.vtk", mesh, U, deform=True)
print("wrote demo_fem.vtk (deformed mesh with displacement field)")
