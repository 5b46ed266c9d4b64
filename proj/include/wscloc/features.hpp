#pragma once

#include "wscloc/image.hpp"
#include "wscloc/scene.hpp"

#include <Eigen/Core>

#include <memory>
#include <span>
#include <vector>

namespace wscloc::feat {

using Vec2 = Eigen::Vector2d;

struct Keypoint {
  double u = 0.0, v = 0.0;  // sub-pixel coordinates
  double response = 0.0;    // Harris corner strength
};

inline constexpr int kDescriptorSize = 81;  // 9x9 normalized patch

struct Descriptor {
  Eigen::Matrix<double, kDescriptorSize, 1> values;
};

struct Match {
  int index_a = -1;
  int index_b = -1;
  double distance = 0.0;  // descriptor L2 distance
};

struct MatchSet {
  int frame_a = -1, frame_b = -1;
  std::vector<Match> pairs;
};

// Harris corners (Sobel gradients, 3x3 binomial-weighted structure tensor,
// k = 0.04) with non-maximum suppression, quadratic sub-pixel refinement and
// deterministic (v, u) tie-breaking. At most max_k keypoints, strongest
// first.
std::vector<Keypoint> detect_keypoints(const img::ImageGray& image, int max_k,
                                       double nms_radius);

// 9x9 bilinear patch, mean-subtracted and L2-normalized; flat patches map to
// the normalized all-ones fallback.
Descriptor describe(const img::ImageGray& image, const Keypoint& kp);

// Balanced k-d tree with max-spread split axis and lower-median split value.
// Immutable after construction; queries are exact.
class KdTree {
 public:
  explicit KdTree(std::vector<Eigen::VectorXd> points);

  // Exact k nearest neighbors by Euclidean distance, ties broken by lower
  // index. Returns at most size() results, sorted by (distance, index).
  std::vector<std::pair<int, double>> nn(const Eigen::VectorXd& query, int count) const;

  int size() const { return static_cast<int>(points_.size()); }
  int depth() const { return depth_; }

 private:
  struct Node {
    int split_dim = -1;     // -1 marks a leaf
    double split_val = 0.0;
    int point = -1;         // leaf payload
    int left = -1, right = -1;
  };

  int build(std::vector<int>& idx, int lo, int hi, int level);
  void search(int node, const Eigen::VectorXd& query, int count,
              std::vector<std::pair<double, int>>& heap) const;

  std::vector<Eigen::VectorXd> points_;
  std::vector<Node> nodes_;
  int root_ = -1;
  int depth_ = 0;
};

std::vector<std::pair<int, double>> kdtree_nn(const KdTree& tree, const Eigen::VectorXd& query,
                                              int count);

// Lowe ratio test (disabled at ratio = 1) followed by mutual-best filtering;
// fully deterministic.
MatchSet match_frames(const std::vector<Descriptor>& desc_a,
                      const std::vector<Descriptor>& desc_b, double ratio);

// Pinhole normalization: ((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy).
Vec2 normalize_coord(const Keypoint& kp, const scene::PinholeCamera& camera);
std::vector<Vec2> normalize_coords(std::span<const Keypoint> kps,
                                   const scene::PinholeCamera& camera);
Keypoint denormalize_coord(const Vec2& x, const scene::PinholeCamera& camera);

}  // namespace wscloc::feat
