#include "strada/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <string>

#include "strada/error.hpp"
#include "strada/textio.hpp"

namespace strada {

RoadGraph::RoadGraph(std::size_t num_nodes)
    : n_(num_nodes),
      adjacency_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_nodes),
                                       static_cast<Eigen::Index>(num_nodes))),
      degrees_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_nodes))),
      adj_list_(num_nodes) {
  if (num_nodes == 0) throw InputError("RoadGraph: num_nodes must be at least 1");
}

RoadGraph RoadGraph::from_edges(std::size_t num_nodes, std::span<const Edge> edges) {
  RoadGraph g(num_nodes);
  for (const Edge& e : edges) {
    if (e.src >= num_nodes || e.dst >= num_nodes) {
      throw InputError("RoadGraph: edge (" + std::to_string(e.src) + ", " + std::to_string(e.dst) +
                       ") references a node outside [0, " + std::to_string(num_nodes) + ")");
    }
    if (e.src == e.dst) {
      throw InputError("RoadGraph: self-loop on node " + std::to_string(e.src));
    }
    if (!(e.weight > 0.0) || !std::isfinite(e.weight)) {
      throw InputError("RoadGraph: edge (" + std::to_string(e.src) + ", " + std::to_string(e.dst) +
                       ") has non-positive weight");
    }
    const auto i = static_cast<Eigen::Index>(e.src);
    const auto j = static_cast<Eigen::Index>(e.dst);
    if (g.adjacency_(i, j) != 0.0) {
      throw InputError("RoadGraph: duplicate edge (" + std::to_string(e.src) + ", " +
                       std::to_string(e.dst) + ")");
    }
    g.adjacency_(i, j) = e.weight;
    g.adjacency_(j, i) = e.weight;
    g.edges_.push_back({std::min(e.src, e.dst), std::max(e.src, e.dst), e.weight});
    g.adj_list_[e.src].push_back(e.dst);
    g.adj_list_[e.dst].push_back(e.src);
  }
  for (auto& l : g.adj_list_) std::sort(l.begin(), l.end());
  g.degrees_ = g.adjacency_.rowwise().sum();
  return g;
}

const std::vector<std::size_t>& RoadGraph::neighbors(std::size_t v) const {
  if (v >= n_) {
    throw InputError("node index " + std::to_string(v) + " out of range [0, " +
                     std::to_string(n_) + ")");
  }
  return adj_list_[v];
}

RoadGraph RoadGraph::permuted(std::span<const std::size_t> perm) const {
  if (perm.size() != n_) throw InputError("RoadGraph::permuted: permutation has wrong length");
  std::vector<Edge> relabeled;
  relabeled.reserve(edges_.size());
  for (const Edge& e : edges_) relabeled.push_back({perm[e.src], perm[e.dst], e.weight});
  return from_edges(n_, relabeled);
}

std::size_t RoadGraph::num_components() const {
  std::vector<bool> seen(n_, false);
  std::size_t components = 0;
  for (std::size_t s = 0; s < n_; ++s) {
    if (seen[s]) continue;
    ++components;
    std::vector<std::size_t> stack{s};
    seen[s] = true;
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      for (std::size_t w : adj_list_[u]) {
        if (!seen[w]) {
          seen[w] = true;
          stack.push_back(w);
        }
      }
    }
  }
  return components;
}

std::vector<std::size_t> khop_neighborhood(const RoadGraph& g, std::size_t v, const KHopSpec& spec) {
  if (v >= g.num_nodes()) {
    throw InputError("khop_neighborhood: node index " + std::to_string(v) + " out of range [0, " +
                     std::to_string(g.num_nodes()) + ")");
  }
  if (spec.max_neighbors == 0) throw InputError("khop_neighborhood: max_neighbors must be >= 1");
  // Level-synchronous BFS; each level is sorted so the result is ordered by
  // (distance, index).
  std::vector<bool> seen(g.num_nodes(), false);
  std::vector<std::size_t> result{v};
  std::vector<std::size_t> frontier{v};
  seen[v] = true;
  for (std::size_t hop = 0; hop < spec.k && !frontier.empty(); ++hop) {
    std::vector<std::size_t> next;
    for (std::size_t u : frontier) {
      for (std::size_t w : g.neighbors(u)) {
        if (!seen[w]) {
          seen[w] = true;
          next.push_back(w);
        }
      }
    }
    std::sort(next.begin(), next.end());
    result.insert(result.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  if (result.size() > spec.max_neighbors) result.resize(spec.max_neighbors);
  return result;
}

Eigen::MatrixXd normalized_laplacian(const RoadGraph& g) {
  const auto& a = g.adjacency();
  const auto& deg = g.degrees();
  const Eigen::Index n = a.rows();
  Eigen::VectorXd inv_sqrt(n);
  for (Eigen::Index i = 0; i < n; ++i) inv_sqrt(i) = deg(i) > 0.0 ? 1.0 / std::sqrt(deg(i)) : 0.0;
  Eigen::MatrixXd l(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double lij = (i == j ? deg(i) : 0.0) - a(i, j);
      l(i, j) = inv_sqrt(i) * lij * inv_sqrt(j);
    }
  }
  return l;
}

std::span<const double> LaplacianPE::row(std::size_t node) const {
  return std::span<const double>(rows_).subspan(node * k_pe, k_pe);
}

LaplacianPE laplacian_pe(const RoadGraph& g, std::size_t k_pe) {
  const std::size_t n = g.num_nodes();
  if (k_pe == 0) throw InputError("laplacian_pe: k_pe must be positive");
  if (k_pe > n) {
    throw InputError("laplacian_pe: k_pe (" + std::to_string(k_pe) + ") exceeds node count (" +
                     std::to_string(n) + ")");
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(normalized_laplacian(g));
  if (solver.info() != Eigen::Success) throw NumericError("laplacian_pe: eigensolver failed");
  const Eigen::VectorXd& values = solver.eigenvalues();
  const Eigen::MatrixXd& vectors = solver.eigenvectors();

  // The null space has one direction per connected component (isolated nodes
  // included), occupying the leading eigenvalues.
  const std::size_t skip = g.num_components();
  LaplacianPE pe;
  pe.k_pe = k_pe;
  pe.modes = std::min(k_pe, n - skip);
  pe.embeddings = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k_pe));
  pe.eigenvalues = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k_pe));
  for (std::size_t c = 0; c < pe.modes; ++c) {
    const auto src = static_cast<Eigen::Index>(skip + c);
    Eigen::VectorXd col = vectors.col(src);
    col.normalize();
    // Largest magnitude entry nonnegative; near-ties go to the lowest index.
    Eigen::Index pivot = 0;
    double best = std::abs(col(0));
    for (Eigen::Index i = 1; i < col.size(); ++i) {
      if (std::abs(col(i)) > best * (1.0 + 1e-9) + 1e-12) {
        best = std::abs(col(i));
        pivot = i;
      }
    }
    if (col(pivot) < 0.0) col = -col;
    pe.embeddings.col(static_cast<Eigen::Index>(c)) = col;
    pe.eigenvalues(static_cast<Eigen::Index>(c)) = values(src);
  }
  pe.rows_.resize(n * k_pe);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k_pe; ++c) {
      pe.rows_[i * k_pe + c] = pe.embeddings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    }
  }
  return pe;
}

RoadGraph load_edge_list(const std::filesystem::path& path, std::size_t num_nodes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open edge list " + path.string());
  std::vector<Edge> edges;
  std::string line;
  std::size_t line_no = 0;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = text::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto fields = text::split(body, ',');
    Edge e;
    const auto where = path.string() + ":" + std::to_string(line_no);
    if ((fields.size() != 2 && fields.size() != 3) || !text::parse_size(fields[0], e.src) ||
        !text::parse_size(fields[1], e.dst) ||
        (fields.size() == 3 && !text::parse_double(fields[2], e.weight))) {
      throw DataError(where + ": expected \"src,dst[,weight]\", got \"" + std::string(body) + "\"");
    }
    if (e.src >= num_nodes || e.dst >= num_nodes) {
      throw DataError(where + ": node index out of range for " + std::to_string(num_nodes) +
                      " nodes");
    }
    if (e.src == e.dst) throw DataError(where + ": self-loop on node " + std::to_string(e.src));
    if (!(e.weight > 0.0) || !std::isfinite(e.weight)) {
      throw DataError(where + ": weight must be positive and finite");
    }
    if (!seen.emplace(std::min(e.src, e.dst), std::max(e.src, e.dst)).second) {
      throw DataError(where + ": duplicate edge (" + std::to_string(e.src) + ", " +
                      std::to_string(e.dst) + ")");
    }
    edges.push_back(e);
  }
  return RoadGraph::from_edges(num_nodes, edges);
}

void save_edge_list(const RoadGraph& g, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write edge list " + path.string());
  for (const Edge& e : g.edges()) {
    out << e.src << ',' << e.dst;
    if (e.weight != 1.0) out << ',' << text::format_double(e.weight);
    out << '\n';
  }
  if (!out) throw DataError("failed writing edge list " + path.string());
}

}  // namespace strada
