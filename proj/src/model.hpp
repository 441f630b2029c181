#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "layers.hpp"
#include "sonar.hpp"

namespace fishseg {

enum class WeightDType : std::uint8_t { F64 = 0, F32 = 1, F16 = 2 };

// Ordered, named weight collection; the unit of serialization. Payloads are
// raw little-endian bytes of the record's dtype.
struct WeightRecord {
    std::string name;
    std::vector<int> shape;
    WeightDType dtype = WeightDType::F64;
    std::vector<std::uint8_t> payload;

    std::int64_t element_count() const;
    std::vector<double> as_doubles() const;
    static WeightRecord from_doubles(std::string name, std::vector<int> shape,
                                     const std::vector<double>& values, WeightDType dtype);
};

struct ModelWeights {
    std::vector<WeightRecord> records;

    const WeightRecord* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_weights(const ModelWeights& w);
ModelWeights decode_weights(const std::vector<std::uint8_t>& bytes);

// one row of the architecture walk, for shape audits
struct StageTrace {
    std::string name;
    std::vector<int> input_shape;
    std::vector<int> output_shape;
};

// The full encoder-decoder network: four down-sampling stages, a bottleneck,
// four up-sampling stages with skip fusion, and a sigmoid head. Fixed
// 1x320x128 input raster.
template <typename S>
class SegmentationModel {
public:
    static constexpr int kInputDim1 = 320;
    static constexpr int kInputDim2 = 128;

    static SegmentationModel random_init(std::uint64_t seed);

    // x: (1,320,128) or (N,1,320,128), values in [0,1]
    Tensor<S> forward(const Tensor<S>& x, Mode mode, Rng* rng = nullptr, Tape<S>* tape = nullptr,
                      std::vector<StageTrace>* trace = nullptr);

    MaskImage predict_mask(const SonarImage& image, double threshold = 0.5);
    SonarImage predict_probabilities(const SonarImage& image);

    // learnable parameters, deterministic order
    std::vector<NamedTensor<S>> parameters();
    // parameters plus BN running statistics: everything serialization carries
    std::vector<NamedTensor<S>> state();

    std::int64_t count_parameters();

    ModelWeights to_weights(WeightDType dtype) const;
    void load_from_weights(const ModelWeights& w);

    bool bn_folded() const { return bn_folded_; }
    void set_bn_folded(bool v) { bn_folded_ = v; }

    ConvLayerBlock<S> enc1, enc2, enc3, enc4, bottleneck, dec1, dec2, dec3, dec4;
    UpSampleBlock<S> up1, up2, up3, up4;
    SigmoidHead<S> head;

private:
    SegmentationModel() = default;
    std::vector<NamedTensor<S>> state_impl(bool include_running);
    bool bn_folded_ = false;
};

template <typename S>
Tensor<S> image_to_tensor(const SonarImage& image);

template <typename S>
Tensor<S> mask_to_tensor(const MaskImage& mask);

MaskImage threshold_probabilities(const SonarImage& probs, double threshold);

// SSEG weight file, little-endian
void save_weights(const ModelWeights& w, const std::string& path);
ModelWeights load_weights_file(const std::string& path);

template <typename S>
void save_model(SegmentationModel<S>& model, const std::string& path, WeightDType dtype = WeightDType::F64);

template <typename S>
SegmentationModel<S> load_model(const std::string& path);

extern template class SegmentationModel<float>;
extern template class SegmentationModel<double>;

}  // namespace fishseg
