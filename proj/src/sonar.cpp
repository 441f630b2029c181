#include "sonar.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <set>

#include "bytes.hpp"

namespace fishseg {

namespace fs = std::filesystem;

// ---- FanGeometry ------------------------------------------------------------

void FanGeometry::to_polar(double x, double y, double& r_m, double& theta_rad) const {
    const double dx = x - apex_x();
    const double dy = apex_y() - y;  // up is positive
    const double d = std::sqrt(dx * dx + dy * dy);
    r_m = d / px_per_meter();
    theta_rad = std::atan2(dx, dy);  // 0 at boresight, positive to starboard
}

bool FanGeometry::in_fan(int px, int py) const {
    double r, th;
    to_polar(px + 0.5, py + 0.5, r, th);
    const double half = aperture_deg * std::numbers::pi / 360.0;
    return r <= range_max_m && std::abs(th) <= half;
}

std::vector<std::uint8_t> FanGeometry::fan_mask() const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(width) * height, 0);
    for (int x = 0; x < width; ++x)
        for (int y = 0; y < height; ++y)
            m[static_cast<std::size_t>(x) * height + y] = in_fan(x, y) ? 1 : 0;
    return m;
}

double FanGeometry::sector_area_fraction() const {
    const double sector = (aperture_deg / 360.0) * std::numbers::pi * radius_px() * radius_px();
    return sector / (static_cast<double>(width) * height);
}

// ---- PolarFrame ----------------------------------------------------------------

void PolarFrame::validate() const {
    if (beam_count < 2 || bin_count < 2)
        raise(ErrorKind::InvalidArgument, "PolarFrame: beam_count and bin_count must be >= 2");
    if (range_max_m <= 0.0) raise(ErrorKind::InvalidArgument, "PolarFrame: range_max must be positive");
    if (aperture_deg <= 0.0 || aperture_deg > 180.0)
        raise(ErrorKind::InvalidArgument, "PolarFrame: aperture must be in (0,180]");
    if (intensities.size() != static_cast<std::size_t>(beam_count) * bin_count)
        raise(ErrorKind::Dimension, "PolarFrame: intensity grid size mismatch");
    for (double v : intensities)
        if (!(v >= 0.0)) raise(ErrorKind::Data, "PolarFrame: intensities must be non-negative finite");
}

// ---- images -------------------------------------------------------------------

SonarImage SonarImage::zeros(int w, int h) {
    SonarImage img;
    img.width = w;
    img.height = h;
    img.pixels.assign(static_cast<std::size_t>(w) * h, 0.0f);
    return img;
}

MaskImage MaskImage::zeros(int w, int h) {
    MaskImage m;
    m.width = w;
    m.height = h;
    m.pixels.assign(static_cast<std::size_t>(w) * h, 0);
    return m;
}

std::size_t MaskImage::count_ones() const {
    std::size_t n = 0;
    for (auto v : pixels) n += v;
    return n;
}

// ---- projection ------------------------------------------------------------------

SonarImage project_polar_grid(const std::vector<double>& grid, int beam_count, int bin_count,
                              double range_max_m, double aperture_deg, const FanGeometry& geo) {
    if (beam_count < 2 || bin_count < 2)
        raise(ErrorKind::InvalidArgument, "project_polar_grid: need at least 2 beams and 2 bins");
    SonarImage img = SonarImage::zeros(geo.width, geo.height);
    const double half_rad = aperture_deg * std::numbers::pi / 360.0;
    const double beam_step = aperture_deg * std::numbers::pi / 180.0 / beam_count;
    const double bin_step = range_max_m / bin_count;

    for (int x = 0; x < geo.width; ++x) {
        for (int y = 0; y < geo.height; ++y) {
            double r, th;
            geo.to_polar(x + 0.5, y + 0.5, r, th);
            if (r > range_max_m || std::abs(th) > half_rad) continue;
            // continuous cell-centered coordinates in (beam, bin) space
            double fb = (th + half_rad) / beam_step - 0.5;
            double fk = r / bin_step - 0.5;
            fb = std::clamp(fb, 0.0, static_cast<double>(beam_count - 1));
            fk = std::clamp(fk, 0.0, static_cast<double>(bin_count - 1));
            const int b0 = std::min(static_cast<int>(fb), beam_count - 2);
            const int k0 = std::min(static_cast<int>(fk), bin_count - 2);
            const double wb = fb - b0;
            const double wk = fk - k0;
            const double v00 = grid[static_cast<std::size_t>(b0) * bin_count + k0];
            const double v01 = grid[static_cast<std::size_t>(b0) * bin_count + k0 + 1];
            const double v10 = grid[static_cast<std::size_t>(b0 + 1) * bin_count + k0];
            const double v11 = grid[static_cast<std::size_t>(b0 + 1) * bin_count + k0 + 1];
            const double v = (1.0 - wb) * ((1.0 - wk) * v00 + wk * v01) + wb * ((1.0 - wk) * v10 + wk * v11);
            img.at(x, y) = static_cast<float>(v);
        }
    }
    return img;
}

SonarImage polar_to_cartesian(const PolarFrame& frame, const FanGeometry& geo) {
    frame.validate();
    SonarImage img = project_polar_grid(frame.intensities, frame.beam_count, frame.bin_count,
                                        frame.range_max_m, frame.aperture_deg, geo);
    double peak = 0.0;
    for (double v : frame.intensities) peak = std::max(peak, v);
    if (peak > 0.0) {
        const float inv = static_cast<float>(1.0 / peak);
        for (auto& p : img.pixels) p = std::clamp(p * inv, 0.0f, 1.0f);
    }
    return img;
}

// ---- augmentation -----------------------------------------------------------------

AugmentParams draw_augment_params(Rng& rng) {
    AugmentParams p;
    p.hflip = rng.uniform() < 0.5;
    p.vflip = rng.uniform() < 0.5;
    p.rotate = rng.uniform() < 0.5;
    if (p.rotate) p.angle_deg = rng.uniform(-20.0, 20.0);
    p.shift = rng.uniform() < 0.5;
    if (p.shift) {
        p.shift_x_frac = rng.uniform(-0.2, 0.2);
        p.shift_y_frac = rng.uniform(-0.2, 0.2);
    }
    p.crop = rng.uniform() < 0.5;
    if (p.crop) {
        p.crop_scale = rng.uniform(0.8, 1.0);
        p.crop_off_x = rng.uniform();
        p.crop_off_y = rng.uniform();
    }
    return p;
}

namespace {

// 2x3 affine mapping output pixel coordinates to source coordinates
struct Affine {
    double m[6] = {1, 0, 0, 0, 1, 0};  // row-major 2x3: x' = m0 x + m1 y + m2

    static Affine identity() { return {}; }

    // this = a composed after b (apply b, then a)
    static Affine compose(const Affine& a, const Affine& b) {
        Affine r;
        r.m[0] = a.m[0] * b.m[0] + a.m[1] * b.m[3];
        r.m[1] = a.m[0] * b.m[1] + a.m[1] * b.m[4];
        r.m[2] = a.m[0] * b.m[2] + a.m[1] * b.m[5] + a.m[2];
        r.m[3] = a.m[3] * b.m[0] + a.m[4] * b.m[3];
        r.m[4] = a.m[3] * b.m[1] + a.m[4] * b.m[4];
        r.m[5] = a.m[3] * b.m[2] + a.m[4] * b.m[5] + a.m[5];
        return r;
    }

    Affine inverse() const {
        const double det = m[0] * m[4] - m[1] * m[3];
        Affine r;
        r.m[0] = m[4] / det;
        r.m[1] = -m[1] / det;
        r.m[3] = -m[3] / det;
        r.m[4] = m[0] / det;
        r.m[2] = -(r.m[0] * m[2] + r.m[1] * m[5]);
        r.m[5] = -(r.m[3] * m[2] + r.m[4] * m[5]);
        return r;
    }

    void apply(double x, double y, double& ox, double& oy) const {
        ox = m[0] * x + m[1] * y + m[2];
        oy = m[3] * x + m[4] * y + m[5];
    }
};

Affine rotation_about(double cx, double cy, double deg) {
    const double a = deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    Affine r;
    r.m[0] = c;
    r.m[1] = -s;
    r.m[2] = cx - c * cx + s * cy;
    r.m[3] = s;
    r.m[4] = c;
    r.m[5] = cy - s * cx - c * cy;
    return r;
}

Affine translation(double dx, double dy) {
    Affine r;
    r.m[2] = dx;
    r.m[5] = dy;
    return r;
}

// maps the crop window [ox, ox+cw] x [oy, oy+ch] onto the full raster
Affine crop_resize(double ox, double oy, double cw, double ch, double w, double h) {
    Affine r;
    r.m[0] = w / cw;
    r.m[2] = -ox * w / cw;
    r.m[4] = h / ch;
    r.m[5] = -oy * h / ch;
    return r;
}

// inverse-map bilinear warp with zero fill
std::vector<float> warp_bilinear(const std::vector<float>& src, int w, int h, const Affine& inv) {
    std::vector<float> dst(static_cast<std::size_t>(w) * h, 0.0f);
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) {
            double sx, sy;
            inv.apply(x + 0.5, y + 0.5, sx, sy);
            sx -= 0.5;
            sy -= 0.5;
            if (sx < -1.0 || sy < -1.0 || sx > w || sy > h) continue;
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            double v = 0.0;
            for (int dx = 0; dx < 2; ++dx) {
                for (int dy = 0; dy < 2; ++dy) {
                    const int xi = x0 + dx, yi = y0 + dy;
                    if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
                    const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                    v += wgt * src[static_cast<std::size_t>(xi) * h + yi];
                }
            }
            dst[static_cast<std::size_t>(x) * h + y] = static_cast<float>(v);
        }
    }
    return dst;
}

void flip_x(std::vector<float>& px, int w, int h) {
    for (int x = 0; x < w / 2; ++x)
        for (int y = 0; y < h; ++y)
            std::swap(px[static_cast<std::size_t>(x) * h + y], px[static_cast<std::size_t>(w - 1 - x) * h + y]);
}

void flip_y(std::vector<float>& px, int w, int h) {
    for (int x = 0; x < w; ++x)
        for (int y = 0; y < h / 2; ++y)
            std::swap(px[static_cast<std::size_t>(x) * h + y], px[static_cast<std::size_t>(x) * h + (h - 1 - y)]);
}

}  // namespace

SamplePair augment_with(const SamplePair& sample, const AugmentParams& p) {
    const int w = sample.image.width, h = sample.image.height;
    if (sample.mask.width != w || sample.mask.height != h)
        raise(ErrorKind::Dimension, "augment: image/mask dims differ for " + sample.id);

    std::vector<float> img = sample.image.pixels;
    std::vector<float> msk(sample.mask.pixels.begin(), sample.mask.pixels.end());

    // flips are exact index permutations, applied directly
    if (p.hflip) {
        flip_x(img, w, h);
        flip_x(msk, w, h);
    }
    if (p.vflip) {
        flip_y(img, w, h);
        flip_y(msk, w, h);
    }

    if (p.rotate || p.shift || p.crop) {
        Affine fwd = Affine::identity();
        if (p.rotate) fwd = Affine::compose(rotation_about(w / 2.0, h / 2.0, p.angle_deg), fwd);
        if (p.shift) fwd = Affine::compose(translation(p.shift_x_frac * w, p.shift_y_frac * h), fwd);
        if (p.crop) {
            const double cw = std::max(1.0, std::round(p.crop_scale * w));
            const double ch = std::max(1.0, std::round(p.crop_scale * h));
            const double ox = p.crop_off_x * (w - cw);
            const double oy = p.crop_off_y * (h - ch);
            fwd = Affine::compose(crop_resize(ox, oy, cw, ch, w, h), fwd);
        }
        const Affine inv = fwd.inverse();
        img = warp_bilinear(img, w, h, inv);
        msk = warp_bilinear(msk, w, h, inv);
    }

    SamplePair out;
    out.id = sample.id;
    out.image = SonarImage::zeros(w, h);
    out.mask = MaskImage::zeros(w, h);
    for (std::size_t i = 0; i < img.size(); ++i) {
        out.image.pixels[i] = std::clamp(img[i], 0.0f, 1.0f);
        out.mask.pixels[i] = msk[i] > 0.5f ? 1 : 0;
    }
    return out;
}

SamplePair augment(const SamplePair& sample, Rng& rng) {
    return augment_with(sample, draw_augment_params(rng));
}

// ---- PGM -----------------------------------------------------------------------

namespace {

void write_pgm_bytes(const std::string& path, int w, int h, const std::vector<std::uint8_t>& rowmajor) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) raise(ErrorKind::Io, "cannot write " + path);
    std::fprintf(f, "P5\n%d %d\n255\n", w, h);
    const std::size_t put = std::fwrite(rowmajor.data(), 1, rowmajor.size(), f);
    const int rc = std::fclose(f);
    if (put != rowmajor.size() || rc != 0) raise(ErrorKind::Io, "short write: " + path);
}

struct PgmData {
    int width = 0, height = 0;
    std::vector<std::uint8_t> rowmajor;
};

int pgm_token(std::FILE* f, const std::string& path) {
    // skips whitespace and '#' comments, then reads one non-negative integer
    int c = std::fgetc(f);
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = std::fgetc(f);
        } else if (std::isspace(c)) {
            c = std::fgetc(f);
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) raise(ErrorKind::Format, "bad PGM header: " + path);
    long v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = std::fgetc(f);
    }
    return static_cast<int>(v);
}

PgmData read_pgm(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) raise(ErrorKind::Io, "cannot open " + path);
    char magic[2] = {0, 0};
    if (std::fread(magic, 1, 2, f) != 2 || magic[0] != 'P' || magic[1] != '5') {
        std::fclose(f);
        raise(ErrorKind::Format, "not a P5 PGM: " + path);
    }
    PgmData d;
    try {
        d.width = pgm_token(f, path);
        d.height = pgm_token(f, path);
        const int maxval = pgm_token(f, path);
        if (maxval != 255) {
            raise(ErrorKind::Format, "unsupported PGM maxval " + std::to_string(maxval) + ": " + path);
        }
    } catch (...) {
        std::fclose(f);
        throw;
    }
    d.rowmajor.resize(static_cast<std::size_t>(d.width) * d.height);
    const std::size_t got = std::fread(d.rowmajor.data(), 1, d.rowmajor.size(), f);
    std::fclose(f);
    if (got != d.rowmajor.size()) raise(ErrorKind::Format, "truncated PGM: " + path);
    return d;
}

}  // namespace

void write_pgm(const std::string& path, const SonarImage& image) {
    std::vector<std::uint8_t> rows(static_cast<std::size_t>(image.width) * image.height);
    std::size_t i = 0;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            rows[i++] = static_cast<std::uint8_t>(std::lround(std::clamp(image.at(x, y), 0.0f, 1.0f) * 255.0f));
    write_pgm_bytes(path, image.width, image.height, rows);
}

void write_pgm(const std::string& path, const MaskImage& mask) {
    std::vector<std::uint8_t> rows(static_cast<std::size_t>(mask.width) * mask.height);
    std::size_t i = 0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            rows[i++] = mask.at(x, y) ? 255 : 0;
    write_pgm_bytes(path, mask.width, mask.height, rows);
}

SonarImage read_pgm_image(const std::string& path) {
    const PgmData d = read_pgm(path);
    SonarImage img = SonarImage::zeros(d.width, d.height);
    std::size_t i = 0;
    for (int y = 0; y < d.height; ++y)
        for (int x = 0; x < d.width; ++x)
            img.at(x, y) = static_cast<float>(d.rowmajor[i++]) / 255.0f;
    return img;
}

MaskImage read_pgm_mask(const std::string& path) {
    const PgmData d = read_pgm(path);
    MaskImage m = MaskImage::zeros(d.width, d.height);
    std::size_t i = 0;
    for (int y = 0; y < d.height; ++y) {
        for (int x = 0; x < d.width; ++x) {
            const std::uint8_t v = d.rowmajor[i++];
            if (v != 0 && v != 255)
                raise(ErrorKind::Data, "non-binary mask value " + std::to_string(v) + " in " + path);
            m.at(x, y) = v ? 1 : 0;
        }
    }
    return m;
}

// ---- dataset ---------------------------------------------------------------------

void write_sample(const SamplePair& sample, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    fs::create_directories(fs::path(dir) / "masks", ec);
    if (ec) raise(ErrorKind::Io, "cannot create dataset directories under " + dir);
    write_pgm((fs::path(dir) / "images" / (sample.id + ".pgm")).string(), sample.image);
    write_pgm((fs::path(dir) / "masks" / (sample.id + ".pgm")).string(), sample.mask);
}

std::vector<SamplePair> load_dataset(const std::string& dir) {
    const fs::path images = fs::path(dir) / "images";
    const fs::path masks = fs::path(dir) / "masks";
    if (!fs::is_directory(images)) raise(ErrorKind::Io, "missing images directory: " + images.string());
    if (!fs::is_directory(masks)) raise(ErrorKind::Io, "missing masks directory: " + masks.string());

    std::set<std::string> ids;
    for (const auto& e : fs::directory_iterator(images))
        if (e.path().extension() == ".pgm") ids.insert(e.path().stem().string());
    if (ids.empty()) raise(ErrorKind::Data, "no .pgm images in " + images.string());

    std::vector<SamplePair> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {  // std::set iterates sorted: deterministic order
        const fs::path mpath = masks / (id + ".pgm");
        if (!fs::exists(mpath)) raise(ErrorKind::Data, "image '" + id + "' has no mask at " + mpath.string());
        SamplePair s;
        s.id = id;
        s.image = read_pgm_image((images / (id + ".pgm")).string());
        s.mask = read_pgm_mask(mpath.string());
        if (s.image.width != s.mask.width || s.image.height != s.mask.height)
            raise(ErrorKind::Dimension, "image/mask dimensions differ for '" + id + "'");
        out.push_back(std::move(s));
    }
    return out;
}

// ---- MBES binary format -------------------------------------------------------------

namespace {
constexpr char kMbesMagic[4] = {'M', 'B', 'E', 'S'};
constexpr std::uint16_t kMbesVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_mbes(const PolarFrame& frame) {
    frame.validate();
    std::vector<std::uint8_t> out;
    out.reserve(18 + frame.intensities.size() * 4);
    for (char c : kMbesMagic) out.push_back(static_cast<std::uint8_t>(c));
    put_u16(out, kMbesVersion);
    put_u16(out, static_cast<std::uint16_t>(frame.beam_count));
    put_u32(out, static_cast<std::uint32_t>(frame.bin_count));
    put_f32(out, static_cast<float>(frame.range_max_m));
    put_f32(out, static_cast<float>(frame.aperture_deg));
    put_f32(out, static_cast<float>(frame.frequency_hz));
    for (double v : frame.intensities) put_f32(out, static_cast<float>(v));
    return out;
}

PolarFrame decode_mbes(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    const std::string magic = r.str(4);
    if (magic != std::string(kMbesMagic, 4)) raise(ErrorKind::Format, "bad MBES magic");
    const std::uint16_t version = r.u16();
    if (version != kMbesVersion)
        raise(ErrorKind::Format, "unsupported MBES version " + std::to_string(version));
    PolarFrame f;
    f.beam_count = r.u16();
    f.bin_count = static_cast<int>(r.u32());
    f.range_max_m = r.f32();
    f.aperture_deg = r.f32();
    f.frequency_hz = r.f32();
    if (f.beam_count < 2 || f.bin_count < 2) raise(ErrorKind::Format, "MBES header has degenerate grid");
    const std::size_t n = static_cast<std::size_t>(f.beam_count) * f.bin_count;
    f.intensities.resize(n);
    for (std::size_t i = 0; i < n; ++i) f.intensities[i] = r.f32();
    f.validate();
    return f;
}

void write_mbes(const std::string& path, const PolarFrame& frame) {
    write_file_bytes(path, encode_mbes(frame));
}

PolarFrame read_mbes(const std::string& path) {
    return decode_mbes(read_file_bytes(path));
}

}  // namespace fishseg
