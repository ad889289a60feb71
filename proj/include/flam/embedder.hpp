#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "flam/nn.hpp"
#include "flam/synthdata.hpp"
#include "flam/tensor.hpp"

namespace flam {

// Attribute-specific embedding map: D -> hidden -> k with leaky_relu(0.2)
// between layers and unit-normalized output rows.
struct Embedder {
    std::string attr_type;
    nn::Mlp mlp;
};

std::size_t embedding_dim(const Embedder& e);
std::size_t feature_dim(const Embedder& e);

// Learnable per-class vectors; rows are re-normalized after each optimizer
// step so they stay unit-norm.
struct Dictionary {
    std::string attr_type;
    ag::Tensor vectors;  // class_count x k
};

// One triple per row; positives share the anchor's class, negatives differ.
// Classes use the dataset label convention, so kAbsent marks an unlabeled
// sample (rejected by embedder_loss).
struct TripletBatch {
    ag::Tensor anchors;
    ag::Tensor positives;
    ag::Tensor negatives;
    std::vector<std::int32_t> anchor_class;
    std::vector<std::int32_t> negative_class;
};

struct EmbedderConfig {
    std::size_t k = 32;
    std::size_t hidden = 0;  // 0 means 4k
    double mu = 0.2;
    double lr = 1e-3;
    std::size_t epochs = 25;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
};

EmbedderConfig embedder_config_from_json(const nlohmann::json& j);
nlohmann::json embedder_config_to_json(const EmbedderConfig& c);

struct EmbedderTrainResult {
    Embedder embedder;
    Dictionary dictionary;
    std::vector<double> epoch_loss;
};

// x: single D-vector or rows of them. Differentiable when a tape is active.
ag::Tensor embed(const Embedder& embedder, const ag::Tensor& x);

// max{0, dist(f,f+) - dist(f,f-) + mu} with dist(u,v) = 1 - cos(u,v).
// 1-D inputs give a scalar; 2-D inputs give the per-row hinge values.
ag::Tensor triplet_loss(const ag::Tensor& f, const ag::Tensor& f_plus,
                        const ag::Tensor& f_minus, double mu);

// Dual-anchor loss: mean over triples of
//   hinge(d_a, e+, e-) + hinge(e_a, d+, d-)
// where d rows come from the dictionary for the triple's classes.
ag::Tensor embedder_loss(const TripletBatch& batch, const Embedder& embedder,
                         const Dictionary& dictionary, double mu);

EmbedderTrainResult train_embedder(const Dataset& train,
                                   std::string_view attr_type,
                                   const EmbedderConfig& config);

// argmax over classes of cos(embed(x), dictionary row); ties go to the
// lowest class index.
std::int32_t pseudo_label(const Embedder& embedder, const Dictionary& dictionary,
                          const ag::Tensor& x);
std::vector<std::int32_t> pseudo_label_batch(const Embedder& embedder,
                                             const Dictionary& dictionary,
                                             const ag::Tensor& rows);

// Detached copy of one dictionary row.
ag::Tensor dictionary_lookup(const Dictionary& dictionary,
                             std::size_t class_index);

void save_embedder(const std::filesystem::path& path, const Embedder& embedder,
                   const Dictionary& dictionary,
                   const nlohmann::json& sidecar = nullptr);
struct LoadedEmbedder {
    Embedder embedder;
    Dictionary dictionary;
};
LoadedEmbedder load_embedder(const std::filesystem::path& path);

// Records' float features as one rows x D double tensor (no grad).
ag::Tensor feature_matrix(const std::vector<FeatureRecord>& records);
ag::Tensor feature_matrix(const std::vector<FeatureRecord>& records,
                          const std::vector<std::size_t>& indices);

}  // namespace flam
