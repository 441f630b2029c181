#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace fishseg {

// Raster geometry: 320 wide x 128 high, sonar apex at the bottom-center
// edge, fan opening upward. One pixel of height spans range_max/128 meters;
// the full range fits the raster height, so the 130 degree fan is
// letterboxed left and right.
struct FanGeometry {
    int width = 320;
    int height = 128;
    double range_max_m = 20.0;
    double aperture_deg = 130.0;

    double apex_x() const { return width / 2.0; }
    double apex_y() const { return static_cast<double>(height); }
    double radius_px() const { return static_cast<double>(height); }
    double px_per_meter() const { return radius_px() / range_max_m; }

    // polar coordinates of a raster position (pixel centers at x+0.5, y+0.5)
    void to_polar(double x, double y, double& r_m, double& theta_rad) const;
    bool in_fan(int px, int py) const;
    std::vector<std::uint8_t> fan_mask() const;          // 1 inside the fan
    double sector_area_fraction() const;                 // analytic sector/raster ratio
};

// Raw MBES ping: beams x bins intensity grid plus acquisition metadata.
// Intensities are stored beam-major (all bins of beam 0, then beam 1, ...).
struct PolarFrame {
    int beam_count = 0;
    int bin_count = 0;
    double range_max_m = 20.0;
    double aperture_deg = 130.0;
    double frequency_hz = 750e3;
    std::vector<double> intensities;

    double& at(int beam, int bin) { return intensities[static_cast<std::size_t>(beam) * bin_count + bin]; }
    double at(int beam, int bin) const { return intensities[static_cast<std::size_t>(beam) * bin_count + bin]; }

    void validate() const;
};

// Cartesian raster in [0,1]; pixels are stored x-major (pixel (x,y) at
// x*height + y) which matches the (1,320,128) tensor layout byte for byte.
struct SonarImage {
    int width = 320;
    int height = 128;
    std::vector<float> pixels;

    float& at(int x, int y) { return pixels[static_cast<std::size_t>(x) * height + y]; }
    float at(int x, int y) const { return pixels[static_cast<std::size_t>(x) * height + y]; }

    static SonarImage zeros(int w = 320, int h = 128);
};

struct MaskImage {
    int width = 320;
    int height = 128;
    std::vector<std::uint8_t> pixels;  // 0 or 1

    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(x) * height + y]; }
    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(x) * height + y]; }

    static MaskImage zeros(int w = 320, int h = 128);
    std::size_t count_ones() const;
};

struct SamplePair {
    std::string id;
    SonarImage image;
    MaskImage mask;
};

// ---- projection -----------------------------------------------------------

// Bilinear fan projection of an arbitrary beams x bins grid (beam-major)
// onto the raster. No normalization; out-of-fan pixels are 0.
SonarImage project_polar_grid(const std::vector<double>& grid, int beam_count, int bin_count,
                              double range_max_m, double aperture_deg, const FanGeometry& geo);

// Full ingestion path: project and normalize by the frame's peak intensity.
SonarImage polar_to_cartesian(const PolarFrame& frame, const FanGeometry& geo = FanGeometry{});

// ---- augmentation -----------------------------------------------------------

struct AugmentParams {
    bool hflip = false;
    bool vflip = false;
    bool rotate = false;
    double angle_deg = 0.0;
    bool shift = false;
    double shift_x_frac = 0.0;  // of width
    double shift_y_frac = 0.0;  // of height
    bool crop = false;
    double crop_scale = 1.0;    // window size as a fraction of each dim
    double crop_off_x = 0.0;    // offset within the slack, in [0,1]
    double crop_off_y = 0.0;
};

// Each transform fires independently with probability 0.5; rotation angle
// uniform in [-20,20] deg, shifts uniform in [-20,20]% per axis, crop window
// uniform in [0.8,1] of each dimension then resized back.
AugmentParams draw_augment_params(Rng& rng);

// Applies the same geometric transform to image and mask. Mask is warped as
// floats and re-binarized at 0.5; vacated regions are zero-filled.
SamplePair augment_with(const SamplePair& sample, const AugmentParams& params);
SamplePair augment(const SamplePair& sample, Rng& rng);

// ---- PGM + dataset ------------------------------------------------------------

void write_pgm(const std::string& path, const SonarImage& image);
void write_pgm(const std::string& path, const MaskImage& mask);
SonarImage read_pgm_image(const std::string& path);
MaskImage read_pgm_mask(const std::string& path);

// Directory layout: <dir>/images/<id>.pgm paired with <dir>/masks/<id>.pgm.
void write_sample(const SamplePair& sample, const std::string& dir);
std::vector<SamplePair> load_dataset(const std::string& dir);

// ---- raw polar ingestion ("MBES" binary, little-endian) -------------------------

std::vector<std::uint8_t> encode_mbes(const PolarFrame& frame);
PolarFrame decode_mbes(const std::vector<std::uint8_t>& bytes);
void write_mbes(const std::string& path, const PolarFrame& frame);
PolarFrame read_mbes(const std::string& path);

}  // namespace fishseg
