#include "cmnet/sfirm.hpp"

namespace cmnet {

std::vector<std::size_t> split_extents(std::size_t extent, std::size_t parts) {
  if (parts == 0) throw ConfigError("split_extents: zero parts");
  const std::size_t base = extent / parts;
  const std::size_t rem = extent % parts;
  if (base == 0) {
    throw ConfigError("cannot divide extent " + std::to_string(extent) + " into " +
                      std::to_string(parts) + " non-empty parts");
  }
  std::vector<std::size_t> sizes(parts, base);
  for (std::size_t i = parts - rem; i < parts; ++i) ++sizes[i];
  return sizes;
}

namespace {

std::size_t grid_side_of(std::size_t parts) {
  switch (parts) {
    case 1:
      return 1;
    case 4:
      return 2;
    case 9:
      return 3;
    default:
      throw ConfigError("spatial division supports 1, 4 or 9 parts, got " +
                        std::to_string(parts));
  }
}

}  // namespace

template <typename T>
std::vector<Var<T>> spatial_division(const Var<T>& map, std::size_t parts) {
  const std::size_t side = grid_side_of(parts);
  if (map.shape().size() != 4) throw ShapeError("spatial_division expects N x C x H x W");
  const auto heights = split_extents(map.dim(2), side);
  const auto widths = split_extents(map.dim(3), side);
  std::vector<Var<T>> tiles;
  tiles.reserve(parts);
  std::size_t y = 0;
  for (std::size_t h : heights) {
    Var<T> band = side == 1 ? map : slice(map, 2, y, y + h);
    std::size_t x = 0;
    for (std::size_t w : widths) {
      tiles.push_back(side == 1 ? band : slice(band, 3, x, x + w));
      x += w;
    }
    y += h;
  }
  return tiles;
}

template <typename T>
Var<T> spatial_join(const std::vector<Var<T>>& tiles) {
  std::size_t side = 0;
  switch (tiles.size()) {
    case 1:
      side = 1;
      break;
    case 4:
      side = 2;
      break;
    case 9:
      side = 3;
      break;
    default:
      throw JoinError("spatial_join needs 1, 4 or 9 tiles, got " + std::to_string(tiles.size()));
  }
  const Shape& ref = tiles.front().shape();
  if (ref.size() != 4) throw JoinError("spatial_join expects rank-4 tiles");
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Shape& s = tiles[i].shape();
    const Shape& row_head = tiles[(i / side) * side].shape();
    const Shape& col_head = tiles[i % side].shape();
    if (s.size() != 4 || s[0] != ref[0] || s[1] != ref[1] || s[2] != row_head[2] ||
        s[3] != col_head[3]) {
      throw JoinError("tile " + std::to_string(i) + " " + shape_string(s) +
                      " is inconsistent with the row-major grid");
    }
  }
  if (side == 1) return tiles.front();
  std::vector<Var<T>> rows;
  for (std::size_t r = 0; r < side; ++r) {
    std::vector<Var<T>> row(tiles.begin() + static_cast<std::ptrdiff_t>(r * side),
                            tiles.begin() + static_cast<std::ptrdiff_t>((r + 1) * side));
    rows.push_back(concat(row, 3));
  }
  return concat(rows, 2);
}

template <typename T>
std::vector<Var<T>> channel_division(const Var<T>& map, std::size_t groups, bool ragged) {
  if (map.shape().size() != 4) throw ShapeError("channel_division expects N x C x H x W");
  const std::size_t c = map.dim(1);
  if (groups == 0) throw ConfigError("channel_division: zero groups");
  if (!ragged && c % groups != 0) {
    throw ConfigError("channel count " + std::to_string(c) + " is not divisible by " +
                      std::to_string(groups) + " groups");
  }
  if (groups == 1) return {map};
  std::vector<Var<T>> out;
  std::size_t begin = 0;
  for (std::size_t size : split_extents(c, groups)) {
    out.push_back(slice(map, 1, begin, begin + size));
    begin += size;
  }
  return out;
}

template <typename T>
Var<T> channel_join(const std::vector<Var<T>>& groups) {
  if (groups.empty()) throw JoinError("channel_join: no groups");
  const Shape& ref = groups.front().shape();
  for (const auto& g : groups) {
    const Shape& s = g.shape();
    if (s.size() != 4 || s[0] != ref[0] || s[2] != ref[2] || s[3] != ref[3]) {
      throw JoinError("channel group " + shape_string(s) + " does not match " +
                      shape_string(ref));
    }
  }
  if (groups.size() == 1) return groups.front();
  return concat(groups, 1);
}

template <typename T>
ChannelAttention<T>::ChannelAttention(std::size_t channels, Rng& rng) : channels_(channels) {
  if (channels < kReduction) {
    throw ConfigError("channel attention needs at least " + std::to_string(kReduction) +
                      " channels, got " + std::to_string(channels));
  }
  fc1_ = Linear<T>(channels, channels / kReduction, false, rng);
  fc2_ = Linear<T>(channels / kReduction, channels, false, rng);
}

template <typename T>
Var<T> ChannelAttention<T>::gate(const Var<T>& part) const {
  if (part.shape().size() != 4 || part.dim(1) != channels_) {
    throw ShapeError("channel attention built for " + std::to_string(channels_) +
                     " channels got " + shape_string(part.shape()));
  }
  const Var<T> avg = fc2_(relu(fc1_(global_avg_pool(part))));
  const Var<T> mx = fc2_(relu(fc1_(global_max_pool(part))));
  return sigmoid(add(avg, mx));
}

template <typename T>
Var<T> ChannelAttention<T>::operator()(const Var<T>& part) const {
  if (force_unit_gate) return part;
  return mul_channel_gate(part, gate(part));
}

template <typename T>
void ChannelAttention<T>::collect(const std::string& prefix,
                                  ParameterRegistry<T>& registry) const {
  fc1_.collect(prefix + "fc1.", registry);
  fc2_.collect(prefix + "fc2.", registry);
}

template <typename T>
SpatialAttention<T>::SpatialAttention(Rng& rng) : conv_(2, 1, kKernel, 1, kKernel / 2, false, rng) {}

template <typename T>
Var<T> SpatialAttention<T>::gate(const Var<T>& group) const {
  if (group.shape().size() != 4) throw ShapeError("spatial attention expects N x C x H x W");
  return sigmoid(conv_(concat<T>({channel_mean(group), channel_max(group)}, 1)));
}

template <typename T>
Var<T> SpatialAttention<T>::operator()(const Var<T>& group) const {
  if (force_unit_gate) return group;
  return mul_spatial_gate(group, gate(group));
}

template <typename T>
void SpatialAttention<T>::collect(const std::string& prefix,
                                  ParameterRegistry<T>& registry) const {
  conv_.collect(prefix + "conv.", registry);
}

template <typename T>
Sfirm<T>::Sfirm(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.division.validate();
  if (config_.use_basic_network_ii) refine_ = build_basic_network_ii<T>(config_, rng);
  const std::size_t channels = out_channels();
  std::size_t n_ca = 0, n_sa = 0;
  switch (config_.attention) {
    case AttentionMode::none:
      break;
    case AttentionMode::plain_cbam:
      n_ca = n_sa = 1;
      break;
    case AttentionMode::divided:
      n_ca = config_.shared_tile_attention ? 1 : config_.division.spatial_parts;
      n_sa = config_.shared_tile_attention ? 1 : config_.division.channel_groups;
      if (!config_.division.ragged_channels && channels % config_.division.channel_groups != 0) {
        throw ConfigError("channel_groups " + std::to_string(config_.division.channel_groups) +
                          " does not divide " + std::to_string(channels) + " channels");
      }
      break;
  }
  for (std::size_t i = 0; i < n_ca; ++i) channel_attention_.emplace_back(channels, rng);
  for (std::size_t i = 0; i < n_sa; ++i) spatial_attention_.emplace_back(rng);
}

template <typename T>
std::size_t Sfirm<T>::out_channels() const {
  return refine_ ? refine_->out_channels() : 256;
}

template <typename T>
void Sfirm<T>::set_force_unit_gates(bool on) {
  force_unit_ = on;
  for (auto& ca : channel_attention_) ca.force_unit_gate = on;
  for (auto& sa : spatial_attention_) sa.force_unit_gate = on;
}

template <typename T>
Var<T> Sfirm<T>::combine(const Var<T>& joined, const Var<T>& running) const {
  if (force_unit_) return running;
  return mul(config_.sigmoid_gates ? sigmoid(joined) : joined, running);
}

template <typename T>
SfirmOutput<T> Sfirm<T>::operator()(const Var<T>& o_cmem, bool training) {
  SfirmOutput<T> out;
  out.r = refine_ ? (*refine_)(o_cmem, training) : o_cmem;
  switch (config_.attention) {
    case AttentionMode::none:
      out.o_se = out.r;
      out.refined = out.r;
      break;
    case AttentionMode::plain_cbam:
      out.o_se = channel_attention_.front()(out.r);
      out.refined = spatial_attention_.front()(out.o_se);
      break;
    case AttentionMode::divided: {
      auto tiles = spatial_division(out.r, config_.division.spatial_parts);
      for (std::size_t i = 0; i < tiles.size(); ++i) {
        tiles[i] = channel_attention_[i % channel_attention_.size()](tiles[i]);
      }
      out.o_se = combine(spatial_join(tiles), out.r);
      auto groups = channel_division(out.o_se, config_.division.channel_groups,
                                     config_.division.ragged_channels);
      for (std::size_t j = 0; j < groups.size(); ++j) {
        groups[j] = spatial_attention_[j % spatial_attention_.size()](groups[j]);
      }
      out.refined = combine(channel_join(groups), out.o_se);
      break;
    }
  }
  return out;
}

template <typename T>
void Sfirm<T>::collect(const std::string& prefix, ParameterRegistry<T>& registry) {
  if (refine_) refine_->collect(prefix + "refine.", registry);
  for (std::size_t i = 0; i < channel_attention_.size(); ++i) {
    channel_attention_[i].collect(prefix + "ca." + std::to_string(i) + ".", registry);
  }
  for (std::size_t j = 0; j < spatial_attention_.size(); ++j) {
    spatial_attention_[j].collect(prefix + "sa." + std::to_string(j) + ".", registry);
  }
}

#define CMNET_INSTANTIATE_SFIRM(T)                                                       \
  template std::vector<Var<T>> spatial_division(const Var<T>&, std::size_t);            \
  template Var<T> spatial_join(const std::vector<Var<T>>&);                             \
  template std::vector<Var<T>> channel_division(const Var<T>&, std::size_t, bool);      \
  template Var<T> channel_join(const std::vector<Var<T>>&);                             \
  template class ChannelAttention<T>;                                                   \
  template class SpatialAttention<T>;                                                   \
  template class Sfirm<T>;

CMNET_INSTANTIATE_SFIRM(float)
CMNET_INSTANTIATE_SFIRM(double)

}  // namespace cmnet
