#include "histosynth/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "histosynth/error.hpp"

namespace histosynth {

namespace {

void write_mat(const std::filesystem::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw ResourceError("cannot write PNG " + path.string());
}

cv::Mat read_mat(const std::filesystem::path& path, int expected_type) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ResourceError("cannot read PNG " + path.string());
  if (m.type() != expected_type)
    throw ValidationError("PNG " + path.string() + " has unexpected pixel format");
  return m;
}

}  // namespace

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  cv::Mat m(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const Rgb p = image(y, x);
      m.at<cv::Vec3b>(y, x) = {p.b, p.g, p.r};
    }
  write_mat(path, m);
}

RgbImage read_rgb_png(const std::filesystem::path& path) {
  const cv::Mat m = read_mat(path, CV_8UC3);
  RgbImage image(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const auto& v = m.at<cv::Vec3b>(y, x);
      image(y, x) = {v[2], v[1], v[0]};
    }
  return image;
}

void write_png(const std::filesystem::path& path, const SubtypeMask& mask) {
  cv::Mat m(mask.height(), mask.width(), CV_8UC1, const_cast<std::uint8_t*>(mask.data()));
  write_mat(path, m);
}

SubtypeMask read_mask_png(const std::filesystem::path& path) {
  const cv::Mat m = read_mat(path, CV_8UC1);
  SubtypeMask mask(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) mask(y, x) = m.at<std::uint8_t>(y, x);
  return mask;
}

void write_png(const std::filesystem::path& path, const InstanceMap& instances) {
  cv::Mat m(instances.height(), instances.width(), CV_16UC1, const_cast<std::uint16_t*>(instances.data()));
  write_mat(path, m);
}

InstanceMap read_instance_png(const std::filesystem::path& path) {
  const cv::Mat m = read_mat(path, CV_16UC1);
  InstanceMap ids(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) ids(y, x) = m.at<std::uint16_t>(y, x);
  return ids;
}

}  // namespace histosynth
