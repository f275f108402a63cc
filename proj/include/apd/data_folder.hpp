#pragma once

#include <algorithm>
#include <filesystem>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <string>
#include <vector>

#include "apd/data.hpp"
#include "apd/errors.hpp"

// Directory-of-class-folders loader (class_name/image files). Kept in its
// own header so only the CLI pulls in OpenCV.
namespace apd {

inline Dataset load_folder_split(const std::string& root, const std::string& split,
                                 int resolution) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(root) / split;
    if (!fs::is_directory(dir))
        throw load_error("dataset root missing split directory: " + dir.string());

    Dataset d;
    d.name = fs::path(root).filename().string();
    d.split = split;
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) class_dirs.push_back(e.path());
    if (class_dirs.empty()) throw load_error("no class folders under " + dir.string());
    std::sort(class_dirs.begin(), class_dirs.end());

    std::vector<Eigen::RowVectorXd> rows;
    for (std::size_t cls = 0; cls < class_dirs.size(); ++cls) {
        d.class_names.push_back(class_dirs[cls].filename().string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dirs[cls]))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            cv::Mat img = cv::imread(f.string(), cv::IMREAD_COLOR);
            if (img.empty()) throw load_error("cannot decode image: " + f.string());
            cv::Mat resized;
            cv::resize(img, resized, cv::Size(resolution, resolution), 0, 0, cv::INTER_LINEAR);
            Eigen::RowVectorXd row(3 * resolution * resolution);
            for (int y = 0; y < resolution; ++y)
                for (int x = 0; x < resolution; ++x) {
                    const auto& px = resized.at<cv::Vec3b>(y, x);  // BGR
                    for (int c = 0; c < 3; ++c)
                        row(static_cast<Eigen::Index>(c) * resolution * resolution +
                            y * resolution + x) = px[2 - c] / 255.0;
                }
            rows.push_back(std::move(row));
            d.labels.push_back(static_cast<int>(cls));
        }
    }
    if (rows.empty()) throw load_error("no images under " + dir.string());
    d.images.resize(static_cast<Eigen::Index>(rows.size()), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        d.images.row(static_cast<Eigen::Index>(i)) = rows[i];
    d.validate();
    return d;
}

inline std::pair<Dataset, Dataset> load_folder_dataset(const std::string& root, int resolution) {
    return {load_folder_split(root, "train", resolution),
            load_folder_split(root, "test", resolution)};
}

}  // namespace apd
