#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "crowdctx/backbone.hpp"
#include "crowdctx/heads.hpp"
#include "crowdctx/tokenizer.hpp"

namespace crowdctx {

struct ModelConfig {
    TokenizerConfig tokenizer;
    BackboneConfig backbone;
    std::size_t in_channels = 3;
    std::size_t input_h = 64;  // training resolution; sizes the position embedding
    std::size_t input_w = 64;
    bool tam = true;
    bool rtm = true;
    std::size_t tam_reduction = 4;
    std::size_t rtm_hidden = 0;  // 0 -> d
    std::size_t output_stride = 4;

    void validate() const;
    // Pixel stride of the token grid.
    std::size_t token_stride() const;
    // token_stride / output_stride
    std::size_t upsample() const;
};

struct ForwardOptions {
    bool auxiliary = true;
    // Skip the TAM even when it is built (F_f = F_p).
    bool bypass_tam = false;
    // Replaces sigmoid(MLP(F_c)) as the TAM gate.
    std::optional<Tensor> gate_override;
};

struct ModelOutput {
    Tensor density;                     // [h_d, w_d]
    std::vector<Tensor> aux_density;    // one per tap, same shape
    std::optional<Tensor> count_estimate;
    std::optional<Tensor> gate;         // [d] when the TAM ran
    Tensor patch_map;                   // F_p [d, h, w]
    Tensor fused_map;                   // F_f
    Encoded encoded;
};

class CrowdModel {
public:
    CrowdModel(const ModelConfig& cfg, std::uint64_t seed);

    ModelOutput forward(const Tensor& image, const ForwardOptions& options = {}) const;
    // Predicted count: sum of the main density map.
    double count(const Tensor& image) const;

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& parameters() { return store_; }
    const ParameterStore& parameters() const { return store_; }
    const Tokenizer& tokenizer() const { return *tokenizer_; }
    const Backbone& backbone() const { return *backbone_; }
    const TokenAttention* tam() const { return tam_.get(); }
    const CountRegressor* rtm() const { return rtm_.get(); }

    // Parameter-name prefixes each switch adds on top of the baseline.
    static std::vector<std::string> tam_prefixes() { return {"tam."}; }
    static std::vector<std::string> rtm_prefixes() { return {"rtm."}; }

private:
    ModelConfig cfg_;
    ParameterStore store_;
    std::unique_ptr<Tokenizer> tokenizer_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<TokenAttention> tam_;
    std::unique_ptr<CountRegressor> rtm_;
    std::unique_ptr<DensityDecoder> decoder_;
    std::map<std::size_t, DensityDecoder> aux_;
};

}  // namespace crowdctx
