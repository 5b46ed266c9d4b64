#include "wscloc/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace wscloc::feat {

namespace {

double pixel_clamped(const img::ImageGray& im, int x, int y) {
  x = std::clamp(x, 0, im.width - 1);
  y = std::clamp(y, 0, im.height - 1);
  return im.at(x, y);
}

double bilinear_clamped(const img::ImageGray& im, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const double v00 = pixel_clamped(im, x0, y0);
  const double v10 = pixel_clamped(im, x0 + 1, y0);
  const double v01 = pixel_clamped(im, x0, y0 + 1);
  const double v11 = pixel_clamped(im, x0 + 1, y0 + 1);
  return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11;
}

img::ImageGray binomial_smooth(const img::ImageGray& in) {
  // Separable [1 2 1] / 4.
  img::ImageGray tmp(in.width, in.height), out(in.width, in.height);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      tmp.at(x, y) = 0.25 * (pixel_clamped(in, x - 1, y) + 2.0 * in.at(x, y) +
                             pixel_clamped(in, x + 1, y));
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      out.at(x, y) = 0.25 * (pixel_clamped(tmp, x, y - 1) + 2.0 * tmp.at(x, y) +
                             pixel_clamped(tmp, x, y + 1));
  return out;
}

double subpixel_offset(double rm, double r0, double rp) {
  const double denom = rm - 2.0 * r0 + rp;
  if (std::abs(denom) < 1e-12) return 0.0;
  return std::clamp(0.5 * (rm - rp) / denom, -0.5, 0.5);
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const img::ImageGray& image, int max_k,
                                       double nms_radius) {
  const int w = image.width, h = image.height;
  for (double v : image.px)
    if (!std::isfinite(v)) throw std::invalid_argument("detect_keypoints: non-finite image");

  img::ImageGray ix(w, h), iy(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      ix.at(x, y) = (pixel_clamped(image, x + 1, y - 1) - pixel_clamped(image, x - 1, y - 1)) +
                    2.0 * (pixel_clamped(image, x + 1, y) - pixel_clamped(image, x - 1, y)) +
                    (pixel_clamped(image, x + 1, y + 1) - pixel_clamped(image, x - 1, y + 1));
      iy.at(x, y) = (pixel_clamped(image, x - 1, y + 1) - pixel_clamped(image, x - 1, y - 1)) +
                    2.0 * (pixel_clamped(image, x, y + 1) - pixel_clamped(image, x, y - 1)) +
                    (pixel_clamped(image, x + 1, y + 1) - pixel_clamped(image, x + 1, y - 1));
    }
  }

  img::ImageGray a(w, h), b(w, h), c(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      a.at(x, y) = ix.at(x, y) * ix.at(x, y);
      b.at(x, y) = iy.at(x, y) * iy.at(x, y);
      c.at(x, y) = ix.at(x, y) * iy.at(x, y);
    }
  }
  a = binomial_smooth(a);
  b = binomial_smooth(b);
  c = binomial_smooth(c);

  img::ImageGray response(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double det = a.at(x, y) * b.at(x, y) - c.at(x, y) * c.at(x, y);
      const double tr = a.at(x, y) + b.at(x, y);
      response.at(x, y) = det - 0.04 * tr * tr;
    }
  }

  // Non-maximum suppression within a Euclidean radius; ties go to the
  // lexicographically smaller (v, u).
  const int r = static_cast<int>(std::ceil(nms_radius));
  const double r2 = nms_radius * nms_radius;
  std::vector<Keypoint> kps;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double resp = response.at(x, y);
      if (resp <= 0.0) continue;
      bool is_max = true;
      for (int dy = -r; dy <= r && is_max; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          if (dx * dx + dy * dy > r2) continue;
          const int nx = x + dx, ny = y + dy;
          if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
          const double other = response.at(nx, ny);
          if (other > resp || (other == resp && (ny < y || (ny == y && nx < x)))) {
            is_max = false;
            break;
          }
        }
      }
      if (!is_max) continue;
      Keypoint kp;
      kp.u = x + (x > 0 && x < w - 1
                      ? subpixel_offset(response.at(x - 1, y), resp, response.at(x + 1, y))
                      : 0.0);
      kp.v = y + (y > 0 && y < h - 1
                      ? subpixel_offset(response.at(x, y - 1), resp, response.at(x, y + 1))
                      : 0.0);
      kp.response = resp;
      kps.push_back(kp);
    }
  }

  std::sort(kps.begin(), kps.end(), [](const Keypoint& p, const Keypoint& q) {
    if (p.response != q.response) return p.response > q.response;
    if (p.v != q.v) return p.v < q.v;
    return p.u < q.u;
  });
  if (static_cast<int>(kps.size()) > max_k) kps.resize(max_k);
  return kps;
}

Descriptor describe(const img::ImageGray& image, const Keypoint& kp) {
  Descriptor d;
  int i = 0;
  for (int dy = -4; dy <= 4; ++dy)
    for (int dx = -4; dx <= 4; ++dx) d.values[i++] = bilinear_clamped(image, kp.u + dx, kp.v + dy);
  d.values.array() -= d.values.mean();
  const double n = d.values.norm();
  if (n < 1e-12) {
    d.values.setOnes();
    d.values /= d.values.norm();
  } else {
    d.values /= n;
  }
  return d;
}

KdTree::KdTree(std::vector<Eigen::VectorXd> points) : points_(std::move(points)) {
  if (points_.empty()) throw std::invalid_argument("KdTree: empty point set");
  const Eigen::Index dim = points_[0].size();
  for (const auto& p : points_)
    if (p.size() != dim) throw std::invalid_argument("KdTree: ragged dimensions");
  std::vector<int> idx(points_.size());
  std::iota(idx.begin(), idx.end(), 0);
  nodes_.reserve(2 * points_.size());
  root_ = build(idx, 0, static_cast<int>(points_.size()), 1);
}

int KdTree::build(std::vector<int>& idx, int lo, int hi, int level) {
  depth_ = std::max(depth_, level);
  const int node_id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  if (hi - lo == 1) {
    nodes_[node_id].point = idx[lo];
    return node_id;
  }

  // Split along the axis of maximum spread at the lower median; equal keys
  // sort by index so construction is order-independent.
  const Eigen::Index dim = points_[0].size();
  int best_dim = 0;
  double best_spread = -1.0;
  for (Eigen::Index d = 0; d < dim; ++d) {
    double mn = points_[idx[lo]][d], mx = mn;
    for (int i = lo + 1; i < hi; ++i) {
      mn = std::min(mn, points_[idx[i]][d]);
      mx = std::max(mx, points_[idx[i]][d]);
    }
    if (mx - mn > best_spread) {
      best_spread = mx - mn;
      best_dim = static_cast<int>(d);
    }
  }
  const int mid = lo + (hi - lo - 1) / 2;  // lower median goes left
  std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi,
                   [&](int p, int q) {
                     const double a = points_[p][best_dim], b = points_[q][best_dim];
                     return a != b ? a < b : p < q;
                   });
  nodes_[node_id].split_dim = best_dim;
  nodes_[node_id].split_val = points_[idx[mid]][best_dim];
  const int left = build(idx, lo, mid + 1, level + 1);
  const int right = build(idx, mid + 1, hi, level + 1);
  nodes_[node_id].left = left;
  nodes_[node_id].right = right;
  return node_id;
}

void KdTree::search(int node_id, const Eigen::VectorXd& query, int count,
                    std::vector<std::pair<double, int>>& heap) const {
  const Node& node = nodes_[node_id];
  if (node.split_dim < 0) {
    const double d2 = (points_[node.point] - query).squaredNorm();
    const std::pair<double, int> cand(d2, node.point);
    if (static_cast<int>(heap.size()) < count) {
      heap.push_back(cand);
      std::push_heap(heap.begin(), heap.end());
    } else if (cand < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = cand;
      std::push_heap(heap.begin(), heap.end());
    }
    return;
  }
  const double diff = query[node.split_dim] - node.split_val;
  const int near = diff <= 0.0 ? node.left : node.right;
  const int far = diff <= 0.0 ? node.right : node.left;
  search(near, query, count, heap);
  // The far side may hold equal-distance points with lower indices, so the
  // bound check is inclusive.
  if (static_cast<int>(heap.size()) < count || diff * diff <= heap.front().first)
    search(far, query, count, heap);
}

std::vector<std::pair<int, double>> KdTree::nn(const Eigen::VectorXd& query, int count) const {
  if (count < 1) throw std::invalid_argument("KdTree::nn: count must be >= 1");
  if (query.size() != points_[0].size())
    throw std::invalid_argument("KdTree::nn: query dimension mismatch");
  count = std::min(count, size());
  std::vector<std::pair<double, int>> heap;  // max-heap on (dist2, index)
  heap.reserve(count);
  search(root_, query, count, heap);
  std::sort_heap(heap.begin(), heap.end());
  std::vector<std::pair<int, double>> out;
  out.reserve(heap.size());
  for (const auto& [d2, i] : heap) out.emplace_back(i, std::sqrt(d2));
  return out;
}

std::vector<std::pair<int, double>> kdtree_nn(const KdTree& tree, const Eigen::VectorXd& query,
                                              int count) {
  return tree.nn(query, count);
}

MatchSet match_frames(const std::vector<Descriptor>& desc_a,
                      const std::vector<Descriptor>& desc_b, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw std::invalid_argument("match_frames: ratio must lie in (0, 1]");
  MatchSet out;
  if (desc_a.empty() || desc_b.empty()) return out;

  std::vector<Eigen::VectorXd> pa(desc_a.size()), pb(desc_b.size());
  for (size_t i = 0; i < desc_a.size(); ++i) pa[i] = desc_a[i].values;
  for (size_t i = 0; i < desc_b.size(); ++i) pb[i] = desc_b[i].values;
  const KdTree tree_a(pa);
  const KdTree tree_b(pb);

  std::vector<int> best_b_of_a(desc_a.size(), -1);
  std::vector<double> best_dist(desc_a.size(), 0.0);
  for (size_t i = 0; i < desc_a.size(); ++i) {
    const auto nn2 = tree_b.nn(pa[i], 2);
    const bool pass = nn2.size() < 2 || ratio >= 1.0 || nn2[0].second < ratio * nn2[1].second;
    if (pass) {
      best_b_of_a[i] = nn2[0].first;
      best_dist[i] = nn2[0].second;
    }
  }
  for (size_t i = 0; i < desc_a.size(); ++i) {
    const int j = best_b_of_a[i];
    if (j < 0) continue;
    const auto back = tree_a.nn(pb[j], 1);
    if (back[0].first == static_cast<int>(i))
      out.pairs.push_back({static_cast<int>(i), j, best_dist[i]});
  }
  return out;
}

Vec2 normalize_coord(const Keypoint& kp, const scene::PinholeCamera& camera) {
  return {(kp.u + 0.5 - camera.cx) / camera.fx, (kp.v + 0.5 - camera.cy) / camera.fy};
}

std::vector<Vec2> normalize_coords(std::span<const Keypoint> kps,
                                   const scene::PinholeCamera& camera) {
  std::vector<Vec2> out;
  out.reserve(kps.size());
  for (const auto& kp : kps) out.push_back(normalize_coord(kp, camera));
  return out;
}

Keypoint denormalize_coord(const Vec2& x, const scene::PinholeCamera& camera) {
  Keypoint kp;
  kp.u = x[0] * camera.fx + camera.cx - 0.5;
  kp.v = x[1] * camera.fy + camera.cy - 0.5;
  return kp;
}

}  // namespace wscloc::feat
