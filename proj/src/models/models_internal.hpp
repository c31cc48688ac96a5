#pragma once

#include <string>
#include <utility>
#include <vector>

#include "uniso/models.hpp"

namespace uniso::model {

using ad::ParamStore;
using ad::Tape;

namespace detail {

struct CrossMemory {
  std::vector<ad::Var> k;
  std::vector<ad::Var> v;
};

reg::ProjectionHead input_head(const ModelConfig& c);
reg::ProjectionHead meta_head(const ModelConfig& c);
std::vector<std::pair<std::size_t, std::size_t>> regressor_shapes(const ModelConfig& c);
std::string reg_weight(std::size_t l);
std::string reg_bias(std::size_t l);

CrossMemory make_memory(Tape& t, const ModelConfig& c, const ParamStore& p, ad::Var enc);
ad::Var decoder_forward(Tape& t, const ModelConfig& c, const ParamStore& p, const CrossMemory& mem,
                        std::span<const int> dec_in);
ad::Var regressor_forward(Tape& t, const ModelConfig& c, const ParamStore& p, ad::Var x);

/// Metadata embeddings of the tasks of `rows`, one per row.
ad::Tensor meta_matrix(const TrainData& data, std::span<const std::size_t> rows);

}  // namespace detail
}  // namespace uniso::model
