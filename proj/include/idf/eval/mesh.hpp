#pragma once

// Zero level-set extraction on a regular grid, surface sampling, and ASCII
// PLY input/output.
//
// Extraction splits every grid cube into six tetrahedra around its main
// diagonal and triangulates the level set inside each tetrahedron (marching
// tetrahedra). Neighbouring cubes split their shared faces identically, so
// the result is crack-free; vertices on shared grid edges are merged.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "idf/scene_mlp.hpp"

namespace idf::eval {

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<std::string> warnings;

  bool empty() const { return faces.empty(); }
};

// Batched signed distance: N x 3 world points -> N values.
using SdfBatch = std::function<std::vector<double>(const Mat<double>&)>;

struct GridSpec {
  Vec3 origin = Vec3::Zero();
  std::array<int, 3> cells{0, 0, 0};  // cubes per axis
  double step = 0;

  long vertex_count() const { return long(cells[0] + 1) * (cells[1] + 1) * (cells[2] + 1); }
  long vertex_index(int i, int j, int k) const { return (long(i) * (cells[1] + 1) + j) * (cells[2] + 1) + k; }
  Vec3 position(int i, int j, int k) const { return origin + step * Vec3(i, j, k); }
};

inline GridSpec make_grid(const SceneBounds& bounds, double resolution) {
  require(resolution > 0, "extract_mesh: resolution must be positive");
  GridSpec g;
  g.origin = bounds.min;
  g.step = resolution;
  long total = 1;
  for (int a = 0; a < 3; ++a) {
    const double extent = bounds.max(a) - bounds.min(a);
    require(extent > 0, "extract_mesh: empty bounds");
    g.cells[std::size_t(a)] = std::max(1, static_cast<int>(std::ceil(extent / resolution - 1e-9)));
    total *= g.cells[std::size_t(a)];
  }
  require(total <= 256L * 256 * 256, "extract_mesh: more than 256^3 voxels");
  return g;
}

// Vertex where the level set crosses grid edge a-b (a < b), shared between
// the cubes and tetrahedra touching that edge.
inline int vertex_on_edge_ordered(long a, long b, const Vec3& pa, const Vec3& pb, const std::vector<double>& values,
                                  Mesh& mesh, std::unordered_map<long long, int>& cache, long long nv) {
  const long long key = (long long)a * nv + b;
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const double va = values[std::size_t(a)], vb = values[std::size_t(b)];
  const double t = std::clamp(va / (va - vb), 0.0, 1.0);
  mesh.vertices.push_back(pa + t * (pb - pa));
  const int idx = static_cast<int>(mesh.vertices.size()) - 1;
  cache.emplace(key, idx);
  return idx;
}

inline Mesh extract_mesh(const SdfBatch& sdf, const SceneBounds& bounds, double resolution, double level = 0.0,
                         int chunk = 65536) {
  const GridSpec g = make_grid(bounds, resolution);
  const int nx = g.cells[0] + 1, ny = g.cells[1] + 1, nz = g.cells[2] + 1;
  std::vector<double> values(static_cast<std::size_t>(g.vertex_count()));
  {
    Mat<double> pts(chunk, 3);
    long filled = 0, written = 0;
    auto flush = [&]() {
      if (filled == 0) return;
      const auto v = sdf(pts.topRows(filled));
      require(static_cast<long>(v.size()) == filled, "extract_mesh: sdf batch size mismatch");
      for (long i = 0; i < filled; ++i) values[std::size_t(written + i)] = v[std::size_t(i)] - level;
      written += filled;
      filled = 0;
    };
    for (int i = 0; i < nx; ++i)
      for (int j = 0; j < ny; ++j)
        for (int k = 0; k < nz; ++k) {
          pts.row(filled++) = g.position(i, j, k).transpose();
          if (filled == chunk) flush();
        }
    flush();
  }

  Mesh mesh;
  const double min_area2 = 1e-9 * resolution * resolution;
  std::unordered_map<long long, int> edge_vertex;
  const long long nv = g.vertex_count();

  // cube corner offsets; tetrahedra share the 0-6 diagonal
  static constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                        {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  static constexpr int kTets[6][4] = {{0, 5, 1, 6}, {0, 1, 2, 6}, {0, 2, 3, 6},
                                      {0, 3, 7, 6}, {0, 7, 4, 6}, {0, 4, 5, 6}};

  for (int i = 0; i < g.cells[0]; ++i) {
    for (int j = 0; j < g.cells[1]; ++j) {
      for (int k = 0; k < g.cells[2]; ++k) {
        std::array<long, 8> id;
        std::array<Vec3, 8> pos;
        std::array<double, 8> val;
        bool pos_any = false, neg_any = false;
        for (int c = 0; c < 8; ++c) {
          const int a = i + kCorner[c][0], b = j + kCorner[c][1], d = k + kCorner[c][2];
          id[std::size_t(c)] = g.vertex_index(a, b, d);
          pos[std::size_t(c)] = g.position(a, b, d);
          val[std::size_t(c)] = values[std::size_t(id[std::size_t(c)])];
          (val[std::size_t(c)] < 0 ? neg_any : pos_any) = true;
        }
        if (!pos_any || !neg_any) continue;
        for (const auto& tet : kTets) {
          std::array<int, 4> inside{}, outside{};
          int ni = 0, no = 0;
          for (int v : tet) (val[std::size_t(v)] < 0 ? inside[std::size_t(ni++)] : outside[std::size_t(no++)]) = v;
          if (ni == 0 || no == 0) continue;
          auto vert = [&](int a, int b) {
            const long ia = id[std::size_t(a)], ib = id[std::size_t(b)];
            return ia < ib ? vertex_on_edge_ordered(ia, ib, pos[std::size_t(a)], pos[std::size_t(b)], values, mesh,
                                                    edge_vertex, nv)
                           : vertex_on_edge_ordered(ib, ia, pos[std::size_t(b)], pos[std::size_t(a)], values, mesh,
                                                    edge_vertex, nv);
          };
          // gradient of the linear interpolant over the tetrahedron: the exact
          // normal of the planar patch it produces
          Mat3 edges;
          Vec3 rise;
          for (int q = 1; q < 4; ++q) {
            edges.row(q - 1) = (pos[std::size_t(tet[q])] - pos[std::size_t(tet[0])]).transpose();
            rise(q - 1) = val[std::size_t(tet[q])] - val[std::size_t(tet[0])];
          }
          const Vec3 outward = edges.partialPivLu().solve(rise);
          auto emit = [&](int a, int b, int c) {
            if (a == b || b == c || a == c) return;
            const Vec3 n = (mesh.vertices[std::size_t(b)] - mesh.vertices[std::size_t(a)])
                               .cross(mesh.vertices[std::size_t(c)] - mesh.vertices[std::size_t(a)]);
            if (n.norm() <= min_area2) return;  // collapsed onto a grid vertex
            if (n.dot(outward) < 0) std::swap(b, c);
            mesh.faces.push_back({a, b, c});
          };
          if (ni == 1) {
            const int s = inside[0];
            emit(vert(s, outside[0]), vert(s, outside[1]), vert(s, outside[2]));
          } else if (no == 1) {
            const int s = outside[0];
            emit(vert(inside[0], s), vert(inside[1], s), vert(inside[2], s));
          } else {
            const int a = vert(inside[0], outside[0]), b = vert(inside[0], outside[1]);
            const int c = vert(inside[1], outside[1]), d = vert(inside[1], outside[0]);
            emit(a, b, c);
            emit(a, c, d);
          }
        }
      }
    }
  }
  if (mesh.faces.empty()) mesh.warnings.push_back("extract_mesh: no zero crossing inside the bounds");
  return mesh;
}

template <class S>
Mesh extract_mesh(const ImplicitMap<S>& map, const SceneBounds& bounds, double resolution) {
  SdfBatch f = [&](const Mat<double>& pts) {
    const Mat<S> v = map.sdf_values(pts.cast<S>());
    std::vector<double> out(std::size_t(v.rows()));
    for (Eigen::Index i = 0; i < v.rows(); ++i) out[std::size_t(i)] = double(v(i, 0));
    return out;
  };
  return extract_mesh(f, bounds, resolution, 0.0, 16384);
}

inline Mesh transformed(const Mesh& m, const PoseSE3& T) {
  Mesh out = m;
  for (auto& v : out.vertices) v = T * v;
  return out;
}

inline double triangle_area(const Mesh& m, const std::array<int, 3>& f) {
  const Vec3& a = m.vertices[std::size_t(f[0])];
  return 0.5 * (m.vertices[std::size_t(f[1])] - a).cross(m.vertices[std::size_t(f[2])] - a).norm();
}

// Area-weighted uniform samples on the surface.
inline std::vector<Vec3> sample_surface(const Mesh& m, int n, std::mt19937_64& rng) {
  require(!m.faces.empty(), "sample_surface: empty mesh");
  std::vector<double> areas;
  for (const auto& f : m.faces) areas.push_back(triangle_area(m, f));
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const auto& f = m.faces[pick(rng)];
    double r1 = u(rng), r2 = u(rng);
    if (r1 + r2 > 1) {
      r1 = 1 - r1;
      r2 = 1 - r2;
    }
    const Vec3& a = m.vertices[std::size_t(f[0])];
    out.push_back(a + r1 * (m.vertices[std::size_t(f[1])] - a) + r2 * (m.vertices[std::size_t(f[2])] - a));
  }
  return out;
}

inline void write_ply(std::ostream& os, const Mesh& m) {
  os << "ply\nformat ascii 1.0\n";
  os << "element vertex " << m.vertices.size() << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  os << "element face " << m.faces.size() << "\n";
  os << "property list uchar int vertex_indices\nend_header\n";
  os << std::setprecision(7);
  for (const auto& v : m.vertices) os << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& f : m.faces) os << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

inline void save_ply(const std::string& path, const Mesh& m) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  write_ply(os, m);
}

// Reads ASCII PLY with x y z as the first vertex properties and triangle faces.
inline Mesh load_ply(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open " + path);
  std::string line;
  std::getline(is, line);
  if (line.rfind("ply", 0) != 0) throw LoadError(path + ": not a PLY file");
  long nv = 0, nf = 0;
  int vprops = 0;
  bool in_vertex = false;
  while (std::getline(is, line)) {
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") throw LoadError(path + ": only ASCII PLY is supported");
    } else if (word == "element") {
      std::string kind;
      long count;
      ss >> kind >> count;
      in_vertex = kind == "vertex";
      if (kind == "vertex") nv = count;
      if (kind == "face") nf = count;
    } else if (word == "property" && in_vertex) {
      ++vprops;
    } else if (word == "end_header") {
      break;
    }
  }
  if (vprops < 3) throw LoadError(path + ": vertices need x y z");
  Mesh m;
  for (long i = 0; i < nv; ++i) {
    if (!std::getline(is, line)) throw LoadError(path + ": truncated vertex list");
    std::istringstream ss(line);
    Vec3 v;
    if (!(ss >> v.x() >> v.y() >> v.z())) throw LoadError(path + ": bad vertex line");
    m.vertices.push_back(v);
  }
  for (long i = 0; i < nf; ++i) {
    if (!std::getline(is, line)) throw LoadError(path + ": truncated face list");
    std::istringstream ss(line);
    int n;
    ss >> n;
    std::vector<int> idx(std::size_t(std::max(n, 0)));
    for (auto& k : idx) ss >> k;
    if (!ss || n < 3) throw LoadError(path + ": bad face line");
    for (int k = 1; k + 1 < n; ++k) m.faces.push_back({idx[0], idx[std::size_t(k)], idx[std::size_t(k + 1)]});
  }
  for (const auto& f : m.faces)
    for (int k : f)
      if (k < 0 || k >= static_cast<int>(m.vertices.size())) throw LoadError(path + ": face index out of range");
  return m;
}

}  // namespace idf::eval
