#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace weberline {

/// Static 3-d tree over a point set; queries are read-only after construction.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::span<const Eigen::Vector3d> points);

  struct Hit {
    std::size_t index = 0;
    double squared_distance = 0.0;
  };

  /// Nearest point; ties resolve to the lowest index.
  Hit nearest(const Eigen::Vector3d& q) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    int left = -1, right = -1;
    std::size_t begin = 0, end = 0;  // range in order_ for leaves
  };
  int build(std::size_t begin, std::size_t end, int depth);
  void search(int node, const Eigen::Vector3d& q, Hit& best) const;

  static constexpr std::size_t kLeafSize = 8;
  std::vector<Eigen::Vector3d> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace weberline
