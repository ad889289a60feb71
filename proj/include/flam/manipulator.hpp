#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "flam/embedder.hpp"
#include "flam/nn.hpp"
#include "flam/synthdata.hpp"
#include "flam/tensor.hpp"

namespace flam {

// Maps (x ⊕ e) to a unit-norm feature of x's dimension: three affine layers
// with leaky_relu between, output L2-normalized.
struct Generator {
    nn::Mlp mlp;
};

std::size_t generator_feature_dim(const Generator& g);  // D
std::size_t generator_embed_dim(const Generator& g);    // k

// Shared trunk with a realness head (1 logit) and a matching head whose
// output concatenates one k-wide block per attribute type, target first.
struct Discriminator {
    nn::Mlp trunk;
    nn::Affine head_rf;
    nn::Affine head_fm;
};

std::size_t discriminator_feature_dim(const Discriminator& d);  // D
std::size_t discriminator_match_dim(const Discriminator& d);    // n*k

enum class Matching { M, S };         // with / without remaining-attr blocks
enum class Sampling { uniform, os };  // partner draw inside the batch
enum class LabelMode { true_labels, pseudo_labels };

std::string to_string(Matching m);
std::string to_string(Sampling s);
std::string to_string(LabelMode l);
Matching matching_from_string(std::string_view s);
Sampling sampling_from_string(std::string_view s);
LabelMode label_mode_from_string(std::string_view s);

struct ManipConfig {
    std::string target_attr;
    // Block order of the matching head after the target block; empty means
    // schema order with the target removed.
    std::vector<std::string> remaining_attrs;
    double lambda_adv = 1.0;
    double lambda_match = 10.0;
    double lambda_cycle = 10.0;
    Matching matching = Matching::M;
    Sampling sampling = Sampling::uniform;
    LabelMode label_mode = LabelMode::true_labels;
    double lr = 1e-3;
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    std::size_t hidden = 128;
    std::uint64_t seed = 0;
};

ManipConfig manip_config_from_json(const nlohmann::json& j);
nlohmann::json manip_config_to_json(const ManipConfig& c);

// Frozen stage-one artifacts, in schema type order.
struct Teachers {
    std::vector<Embedder> embedders;
    std::vector<Dictionary> dictionaries;
};

// x̃ = G(x ⊕ e); rows or single vectors. Differentiable when a tape is
// active, so callers detach inputs they want treated as constants.
ag::Tensor generate(const Generator& g, const ag::Tensor& x, const ag::Tensor& e);

ag::Tensor discriminator_logits(const Discriminator& d, const ag::Tensor& x);
ag::Tensor discriminator_features(const Discriminator& d, const ag::Tensor& x);

// d_loss = mean(-log σ(rf(x_real))) + mean(-log σ(-rf(x_fake_detached)));
// g_loss = mean(-log σ(rf(x_fake))), the non-saturating form. x_fake is
// detached inside the d_loss branch only.
struct AdvLosses {
    ag::Tensor d_loss;
    ag::Tensor g_loss;
};
AdvLosses adv_losses(const Discriminator& d, const ag::Tensor& x_real,
                     const ag::Tensor& x_fake);

// Eq. with two squared-L2 terms, batch-averaged:
//   real: f(x)      vs  φ_target(x)       ⊕ φ_remaining(x)…
//   fake: f(x̃)     vs  φ_target(x_minus) ⊕ φ_remaining(x)…
// embedders[0] is the target teacher, the rest follow the matching head's
// block order. Mode S restricts both differences to the target block.
// Teacher forwards run without gradient; gradient reaches D through f and
// G through x_tilde when x_tilde is attached.
ag::Tensor feature_matching_loss(const Discriminator& d,
                                 const std::vector<Embedder>& embedders,
                                 const ag::Tensor& x, const ag::Tensor& x_minus,
                                 const ag::Tensor& x_tilde, Matching mode);

// Batch-averaged ‖x − G(G(x, e_minus), φ_a(x))‖².
ag::Tensor cycle_loss(const Generator& g, const Embedder& embedder_a,
                      const ag::Tensor& x, const ag::Tensor& e_minus);

inline constexpr std::ptrdiff_t kNoCandidate = -1;

// Partner index for batch row `anchor`: among rows whose target class
// differs from the anchor's, the one minimizing the summed remaining-attr
// embedding distance Σ (1 − cos); ties go to the lowest row. kNoCandidate
// when every other row shares the anchor's class. remaining_embeddings
// holds one B x k matrix per remaining attribute (empty list means all
// eligible rows tie at cost zero).
std::ptrdiff_t online_sample(const std::vector<ag::Tensor>& remaining_embeddings,
                             const std::vector<std::int32_t>& target_class,
                             std::size_t anchor);

struct EpochLog {
    double d_adv = 0.0;
    double g_adv = 0.0;
    double match = 0.0;
    double cycle = 0.0;
    double proxy = 0.0;
};

struct ManipTrainResult {
    Generator generator;
    Discriminator discriminator;
    std::vector<EpochLog> epochs;
};

ManipTrainResult train_manipulator(const Dataset& train, const Teachers& teachers,
                                   const ManipConfig& config);

// Mean over rows of cos(x, G(G(x, e⁻), φ_a(x))) where e⁻ is the embedding
// of another uniformly drawn sample row (itself when the sample has one
// row). Deterministic in (inputs, seed).
double convergence_proxy(const Generator& g, const Embedder& embedder_a,
                         const ag::Tensor& sample_rows, std::uint64_t seed = 0);

void save_manipulator(const std::filesystem::path& path, const Generator& g,
                      const Discriminator& d,
                      const nlohmann::json& sidecar = nullptr);
struct LoadedManipulator {
    Generator generator;
    Discriminator discriminator;
};
LoadedManipulator load_manipulator(const std::filesystem::path& path);

}  // namespace flam
