#pragma once

// Static road network: adjacency, k-hop neighborhoods and normalized-Laplacian
// positional encodings.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace strada {

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double weight = 1.0;
};

// Undirected weighted graph with a dense symmetric adjacency matrix.
class RoadGraph {
 public:
  explicit RoadGraph(std::size_t num_nodes);
  // Each unordered pair at most once; self-loops and nonpositive weights are
  // rejected.
  static RoadGraph from_edges(std::size_t num_nodes, std::span<const Edge> edges);

  std::size_t num_nodes() const noexcept { return n_; }
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  const Eigen::MatrixXd& adjacency() const noexcept { return adjacency_; }
  const Eigen::VectorXd& degrees() const noexcept { return degrees_; }
  // Adjacent nodes in ascending index order.
  const std::vector<std::size_t>& neighbors(std::size_t v) const;

  // Relabels node i as perm[i].
  RoadGraph permuted(std::span<const std::size_t> perm) const;
  std::size_t num_components() const;
  bool connected() const { return num_components() == 1; }

 private:
  std::size_t n_;
  std::vector<Edge> edges_;
  Eigen::MatrixXd adjacency_;
  Eigen::VectorXd degrees_;
  std::vector<std::vector<std::size_t>> adj_list_;
};

struct KHopSpec {
  std::size_t k = 3;
  std::size_t max_neighbors = 8;
  friend bool operator==(const KHopSpec&, const KHopSpec&) = default;
};

// Nodes within k hops of v ordered by (hop distance, index), v first,
// truncated to spec.max_neighbors.
std::vector<std::size_t> khop_neighborhood(const RoadGraph& g, std::size_t v, const KHopSpec& spec);

// D^{-1/2} (D − A) D^{-1/2}; isolated nodes get all-zero rows and columns.
Eigen::MatrixXd normalized_laplacian(const RoadGraph& g);

struct LaplacianPE {
  Eigen::MatrixXd embeddings;   // N × k_pe, row i encodes node i
  Eigen::VectorXd eigenvalues;  // k_pe, ascending; padded entries are 0
  std::size_t k_pe = 0;
  std::size_t modes = 0;        // leading columns holding real eigenvectors

  std::span<const double> row(std::size_t node) const;

 private:
  friend LaplacianPE laplacian_pe(const RoadGraph&, std::size_t);
  // Row-major copy for cheap row views.
  std::vector<double> rows_;
};

// Eigenvectors of the k_pe smallest non-trivial eigenvalues of the normalized
// Laplacian (one null vector per connected component is skipped). Columns
// are sign-fixed so their largest-magnitude entry is nonnegative; missing
// modes are zero columns.
LaplacianPE laplacian_pe(const RoadGraph& g, std::size_t k_pe);

// Text edge list: one "src,dst[,weight]" per line, 0-based, each pair once.
// Blank lines and lines starting with '#' are skipped.
RoadGraph load_edge_list(const std::filesystem::path& path, std::size_t num_nodes);
void save_edge_list(const RoadGraph& g, const std::filesystem::path& path);

}  // namespace strada
